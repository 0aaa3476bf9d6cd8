//! Binary P6 image read/write.

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), w * h * 3, "pixel buffer size mismatch");
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = format!("P6\n{w} {h}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(rgb))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let mut token = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        // whitespace-separated token, honoring '#' comments
        let mut out = String::new();
        loop {
            let mut byte = [0u8; 1];
            let n = reader
                .read(&mut byte)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            if n == 0 {
                if out.is_empty() {
                    return Err(Error::data(path.display().to_string(), "truncated header"));
                }
                return Ok(out);
            }
            let c = byte[0] as char;
            if c == '#' {
                let mut skip = String::new();
                reader
                    .read_line(&mut skip)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                continue;
            }
            if c.is_whitespace() {
                if out.is_empty() {
                    continue;
                }
                return Ok(out);
            }
            out.push(c);
        }
    };
    let magic = token(&mut reader)?;
    if magic != "P6" {
        return Err(Error::data(
            path.display().to_string(),
            format!("expected P6 magic, got {magic:?}"),
        ));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::data(path.display().to_string(), format!("bad header value {s:?}")))
    };
    let w = parse(token(&mut reader)?)?;
    let h = parse(token(&mut reader)?)?;
    let maxval = parse(token(&mut reader)?)?;
    if maxval != 255 {
        return Err(Error::data(
            path.display().to_string(),
            format!("unsupported maxval {maxval}"),
        ));
    }
    let mut rgb = vec![0u8; w * h * 3];
    reader
        .read_exact(&mut rgb)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok((w, h, rgb))
}
