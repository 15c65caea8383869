/// Affine 8-bit quantisation of `[-1, 1]` onto `[0, 255]`, clamping outside values.
pub fn quantize(x: f32) -> u8 {
    let v = ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round();
    v as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 127.5 - 1.0
}
