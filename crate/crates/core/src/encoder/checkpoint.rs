//! Plain-text checkpoint format:
//!
//! ```text
//! eyephen-encoder 1
//! d <d>
//! max_len <n>
//! init Random|FromCheckpoint
//! vocab <size>
//! <one token per line>
//! tensor <name> <rows> <cols>
//! <rows lines of space-separated values>
//! ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so identical
//! states produce identical bytes and loading restores them exactly.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{EncoderError, EncoderInit, EncoderParams, EncoderState, MlmHead, Vocabulary, PARAM_NAMES};

const MAGIC: &str = "eyephen-encoder 1";

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Array2<f64>) -> std::io::Result<()> {
    writeln!(w, "tensor {name} {} {}", t.nrows(), t.ncols())?;
    for row in t.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, enc: &EncoderState, head: &MlmHead) -> Result<(), EncoderError> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "d {}", enc.d)?;
    writeln!(w, "max_len {}", enc.max_len)?;
    writeln!(w, "init {:?}", enc.init)?;
    writeln!(w, "vocab {}", enc.vocab.len())?;
    for t in enc.vocab.tokens() {
        writeln!(w, "{t}")?;
    }
    for (name, t) in PARAM_NAMES.iter().zip(enc.params.tensors()) {
        write_tensor(&mut w, name, t)?;
    }
    write_tensor(&mut w, "mlm_w", &head.w)?;
    write_tensor(&mut w, "mlm_b", &head.b.clone().insert_axis(ndarray::Axis(0)))?;
    writeln!(w, "end")?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, enc: &EncoderState, head: &MlmHead) -> Result<(), EncoderError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, enc, head)?;
    w.flush()?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    n: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String, EncoderError> {
        self.n += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, m: impl Into<String>) -> EncoderError {
        EncoderError::Checkpoint {
            line: self.n,
            message: m.into(),
        }
    }

    fn field(&mut self, key: &str) -> Result<String, EncoderError> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| self.err(format!("expected `{key} ...`")))
    }

    fn number(&mut self, key: &str) -> Result<usize, EncoderError> {
        let v = self.field(key)?;
        v.parse().map_err(|_| self.err(format!("bad {key} value {v:?}")))
    }

    fn tensor(&mut self, name: &str) -> Result<Array2<f64>, EncoderError> {
        let header = self.field("tensor")?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != name {
            return Err(self.err(format!("expected tensor {name}")));
        }
        let rows: usize = parts[1].parse().map_err(|_| self.err("bad row count"))?;
        let cols: usize = parts[2].parse().map_err(|_| self.err("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next()?;
            let before = data.len();
            for v in line.split(' ').filter(|s| !s.is_empty()) {
                data.push(v.parse::<f64>().map_err(|_| self.err(format!("bad value {v:?}")))?);
            }
            if data.len() - before != cols {
                return Err(self.err(format!("expected {cols} values")));
            }
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(EncoderState, MlmHead), EncoderError> {
    let mut lines = Lines { inner: r.lines(), n: 0 };
    if lines.next()? != MAGIC {
        return Err(lines.err("not an encoder checkpoint"));
    }
    let d = lines.number("d")?;
    let max_len = lines.number("max_len")?;
    let init = match lines.field("init")?.as_str() {
        "Random" => EncoderInit::Random,
        "FromCheckpoint" => EncoderInit::FromCheckpoint,
        other => return Err(lines.err(format!("unknown init {other:?}"))),
    };
    let size = lines.number("vocab")?;
    let mut tokens = Vec::with_capacity(size);
    for _ in 0..size {
        tokens.push(lines.next()?);
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let mut params = EncoderParams::zeros(size, max_len, d);
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors_mut()) {
        let loaded = lines.tensor(name)?;
        if loaded.dim() != t.dim() {
            return Err(lines.err(format!("tensor {name} has shape {:?}, expected {:?}", loaded.dim(), t.dim())));
        }
        *t = loaded;
    }
    let w = lines.tensor("mlm_w")?;
    let b = lines.tensor("mlm_b")?;
    if w.dim() != (size, d) || b.dim() != (1, size) {
        return Err(lines.err("MLM head shape does not match vocabulary"));
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    let head = MlmHead {
        w,
        b: Array1::from_vec(b.into_raw_vec_and_offset().0),
    };
    Ok((
        EncoderState {
            vocab,
            params,
            d,
            max_len,
            init,
        },
        head,
    ))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderState, MlmHead), EncoderError> {
    read_checkpoint(BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let vocab = Vocabulary::build(&["the cat sat on the mat ."], 1, None).unwrap();
        let n = vocab.len();
        let enc = EncoderState::random(vocab, 4, 16, 11);
        let head = MlmHead::random(n, 4, 12);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &enc, &head).unwrap();
        let (enc2, head2) = read_checkpoint(a.as_slice()).unwrap();
        assert_eq!(enc, enc2);
        assert_eq!(head, head2);
        let mut b = Vec::new();
        write_checkpoint(&mut b, &enc2, &head2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_reports_line() {
        let vocab = Vocabulary::build(&["a b"], 1, None).unwrap();
        let n = vocab.len();
        let enc = EncoderState::random(vocab, 2, 4, 1);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &enc, &MlmHead::zeros(n, 2)).unwrap();
        let text = String::from_utf8(a).unwrap();
        let cut: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            read_checkpoint(cut.as_bytes()),
            Err(EncoderError::Checkpoint { .. })
        ));
    }
}
