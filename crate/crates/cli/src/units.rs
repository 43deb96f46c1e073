//! Byte size arguments.

/// Parses `4096`, `64K`, `64KiB`, `1.5MiB`, `2GB`. Binary suffixes and bare
/// `K`/`M`/`G` are powers of 1024; `KB`/`MB`/`GB` are powers of 1000.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("invalid size `{s}`"))?;
    let scale: f64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "k" | "kib" => 1024.0,
        "m" | "mib" => 1024.0 * 1024.0,
        "g" | "gib" => 1024.0 * 1024.0 * 1024.0,
        "kb" => 1e3,
        "mb" => 1e6,
        "gb" => 1e9,
        other => return Err(format!("unknown size unit `{other}`")),
    };
    let bytes = value * scale;
    if bytes.fract() != 0.0 || bytes > u64::MAX as f64 {
        return Err(format!("size `{s}` is not a whole number of bytes"));
    }
    Ok(bytes as u64)
}
