//! Parameter counts computed straight from the published layer tables,
//! without touching the model builders.

/// EfficientNet-B0 with a one-unit dense head. Convolutions carry no bias,
/// every batch norm contributes gamma and beta, SE dense layers carry bias.
pub fn b0_param_count() -> usize {
    // (expand, kernel, in, out) for each of the 16 blocks
    #[rustfmt::skip]
    let blocks: [(usize, usize, usize, usize); 16] = [
        (1, 3, 32, 16),
        (6, 3, 16, 24), (6, 3, 24, 24),
        (6, 5, 24, 40), (6, 5, 40, 40),
        (6, 3, 40, 80), (6, 3, 80, 80), (6, 3, 80, 80),
        (6, 5, 80, 112), (6, 5, 112, 112), (6, 5, 112, 112),
        (6, 5, 112, 192), (6, 5, 192, 192), (6, 5, 192, 192), (6, 5, 192, 192),
        (6, 3, 192, 320),
    ];
    let mut total = 3 * 3 * 3 * 32 + 2 * 32;
    for (e, k, cin, cout) in blocks {
        let mid = cin * e;
        if e != 1 {
            total += cin * mid + 2 * mid;
        }
        total += k * k * mid + 2 * mid;
        let sq = (cin / 4).max(1);
        total += mid * sq + sq + sq * mid + mid;
        total += mid * cout + 2 * cout;
    }
    total += 320 * 1280 + 2 * 1280;
    total + 1280 + 1
}

/// U-Net with bias-free 3x3 convs + batch norm, biased 2x2 transposed convs
/// and a biased 1x1 head.
pub fn unet_param_count(base: usize, levels: usize, in_channels: usize) -> usize {
    let conv_bn = |cin: usize, cout: usize| 9 * cin * cout + 2 * cout;
    let widths: Vec<usize> = (0..=levels).map(|i| base * 2usize.pow(i as u32)).collect();
    let mut total = 0;
    let mut cin = in_channels;
    for &c in &widths {
        total += conv_bn(cin, c) + conv_bn(c, c);
        cin = c;
    }
    for &c in widths[..levels].iter().rev() {
        total += 4 * cin * c + c + conv_bn(2 * c, c) + conv_bn(c, c);
        cin = c;
    }
    total + cin + 1
}
