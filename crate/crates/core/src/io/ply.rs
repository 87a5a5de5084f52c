//! Point-cloud PLY files, ASCII by default or binary little-endian.

use std::io::{BufRead, Write};

use nalgebra::Vector3;

use super::IoError;

pub fn write_ply<W: Write>(mut w: W, points: &[Vector3<f64>], binary: bool) -> Result<(), IoError> {
    let format = if binary { "binary_little_endian" } else { "ascii" };
    write!(
        w,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    )?;
    for p in points {
        if binary {
            for c in p.iter() {
                w.write_all(&c.to_le_bytes())?;
            }
        } else {
            // `Display` for f64 prints the shortest string that parses back exactly.
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ply<R: BufRead>(mut r: R) -> Result<Vec<Vector3<f64>>, IoError> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String, IoError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(IoError::format("unexpected end of PLY header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(IoError::format("missing ply magic"));
    }
    let mut binary = None;
    let mut count = None;
    let mut props = 0;
    loop {
        let l = next_line(&mut r)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(IoError::format(format!("unsupported PLY format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| IoError::format("bad vertex count"))?)
            }
            ["property", "double", _] => props += 1,
            ["property", ..] => return Err(IoError::format("only double vertex properties are supported")),
            ["end_header"] => break,
            _ => {}
        }
    }
    let (Some(binary), Some(count)) = (binary, count) else {
        return Err(IoError::format("PLY header lacks format or vertex count"));
    };
    if props != 3 {
        return Err(IoError::format(format!("expected 3 vertex properties, got {props}")));
    }
    let mut out = Vec::with_capacity(count);
    if binary {
        let mut buf = [0u8; 24];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let c = |i: usize| f64::from_le_bytes(buf[8 * i..8 * i + 8].try_into().expect("8 bytes"));
            out.push(Vector3::new(c(0), c(1), c(2)));
        }
    } else {
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| IoError::format(format!("bad PLY value {t}"))))
                .collect::<Result<_, _>>()?;
            if v.len() != 3 {
                return Err(IoError::format("PLY vertex must have 3 values"));
            }
            out.push(Vector3::new(v[0], v[1], v[2]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_round_trip_exactly() {
        let pts = vec![Vector3::new(0.1, -1.0 / 3.0, 2e-17), Vector3::new(1e300, 0.0, -7.25)];
        for binary in [false, true] {
            let mut buf = Vec::new();
            write_ply(&mut buf, &pts, binary).unwrap();
            assert_eq!(read_ply(buf.as_slice()).unwrap(), pts);
        }
        let mut buf = Vec::new();
        write_ply(&mut buf, &[], false).unwrap();
        assert!(read_ply(buf.as_slice()).unwrap().is_empty());
    }
}
