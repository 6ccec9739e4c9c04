use crate::config::StackConfig;

/// Trainable parameters of a stack built from `cfg`.
///
/// Per direction of layer `l` with input width `n`:
/// four `[d, n]` and four `[d, d']` gate matrices, `W_p: [d', d]`, and
/// either static gate LN (`3·4·d`: two scales and one shift per gate) or a
/// summarizer `[p', n] + p'` with twelve generators `[d, p'] + d`. The cell
/// LN contributes `2d` when static or two more generators when generated.
/// The output layer adds `C·2d' + C`.
pub fn count_params(cfg: &StackConfig) -> u64 {
    let (d, dp, p) = (cfg.cell_size as u64, cfg.proj_size as u64, cfg.summary_size as u64);
    let generator = d * p + d;
    let mut total = 0u64;
    for l in 0..cfg.num_layers {
        let n = cfg.layer_input_dim(l) as u64;
        let mut dir = 4 * d * n + 4 * d * dp + dp * d;
        dir += if cfg.dln { p * n + p + 12 * generator } else { 12 * d };
        dir += if cfg.dln_cell_state { 2 * generator } else { 2 * d };
        total += 2 * dir;
    }
    let c = cfg.num_classes as u64;
    total + c * 2 * dp + c
}

/// `count` in millions with two decimals, e.g. `10.44M`.
pub fn format_millions(count: u64) -> String {
    format!("{:.2}M", count as f64 / 1e6)
}

/// Thousands-separated integer, e.g. `10,435,948`.
pub fn format_thousands(count: u64) -> String {
    let digits = count.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
