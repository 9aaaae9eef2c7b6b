use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub const DUMP_MAGIC: [u8; 4] = *b"LFRD";
pub const DUMP_VERSION: u32 = 1;

/// Image tokens (`N×C`) and class token (`1×C`) of every layer.
///
/// Layers are addressed 1-based: layer `L` is the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    tokens: Vec<Tensor>,
    cls: Vec<Tensor>,
    grid: (usize, usize),
}

impl FeatureStack {
    pub fn new(tokens: Vec<Tensor>, cls: Vec<Tensor>, grid: (usize, usize)) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != cls.len() {
            return Err(Error::dim("feature_stack", &[tokens.len()], &[cls.len()]));
        }
        let n = grid.0 * grid.1;
        let c = tokens[0].cols();
        for (t, k) in tokens.iter().zip(&cls) {
            if t.shape() != [n, c] {
                return Err(Error::dim("feature_stack", t.shape(), &[n, c]));
            }
            if k.shape() != [1, c] {
                return Err(Error::dim("feature_stack", k.shape(), &[1, c]));
            }
        }
        Ok(Self { tokens, cls, grid })
    }

    /// Splits `(N+1)×C` sequences whose row 0 is the class token.
    pub fn from_sequences(seqs: &[&Tensor], grid: (usize, usize)) -> Result<Self> {
        let n = grid.0 * grid.1;
        let mut tokens = Vec::with_capacity(seqs.len());
        let mut cls = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.rows() != n + 1 {
                return Err(Error::dim("feature_stack", s.shape(), &[n + 1]));
            }
            cls.push(s.slice_rows(0, 1)?);
            tokens.push(s.slice_rows(1, n)?);
        }
        Self::new(tokens, cls, grid)
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.tokens.len()
    }

    pub fn width(&self) -> usize {
        self.tokens[0].cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens[0].rows()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Image tokens of layer `l` (1-based).
    pub fn tokens(&self, l: usize) -> &Tensor {
        &self.tokens[l - 1]
    }

    /// Class token of layer `l` (1-based).
    pub fn cls(&self, l: usize) -> &Tensor {
        &self.cls[l - 1]
    }

    pub fn tokens_mut(&mut self, l: usize) -> &mut Tensor {
        &mut self.tokens[l - 1]
    }

    pub fn cls_mut(&mut self, l: usize) -> &mut Tensor {
        &mut self.cls[l - 1]
    }
}

/// Serializes in the little-endian `LFRD` layout: header of seven `u32`
/// words, then per layer the `N×C` tokens and the `1×C` class token as f32.
pub fn write_features(stack: &FeatureStack, out: &mut impl Write) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DUMP_MAGIC);
    for word in [
        DUMP_VERSION,
        stack.depth() as u32,
        stack.num_tokens() as u32,
        stack.width() as u32,
        stack.grid.0 as u32,
        stack.grid.1 as u32,
    ] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for (t, c) in stack.tokens.iter().zip(&stack.cls) {
        for v in t.data().iter().chain(c.data()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
}

pub fn read_features(input: &mut impl Read) -> Result<FeatureStack> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<stream>", e))?;
    parse_features(&bytes)
}

fn parse_features(bytes: &[u8]) -> Result<FeatureStack> {
    const HEADER: usize = 4 + 6 * 4;
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedPayload {
            needed: HEADER,
            available: bytes.len(),
        }
        .into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != DUMP_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DUMP_MAGIC,
            found: magic,
        }
        .into());
    }
    if bytes.len() < HEADER {
        return Err(FormatError::TruncatedPayload {
            needed: HEADER,
            available: bytes.len(),
        }
        .into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != DUMP_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: DUMP_VERSION,
            found: version,
        }
        .into());
    }
    let (l, n, c, rows, cols) = (
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
        word(5) as usize,
    );
    if rows * cols != n || l == 0 || c == 0 {
        return Err(FormatError::Malformed(format!("header L={l} N={n} C={c} grid={rows}x{cols}")).into());
    }
    let needed = HEADER + l * (n + 1) * c * 4;
    if bytes.len() < needed {
        return Err(FormatError::TruncatedPayload {
            needed,
            available: bytes.len(),
        }
        .into());
    }
    if bytes.len() > needed {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - needed)).into());
    }
    let mut floats = bytes[HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
    let mut tokens = Vec::with_capacity(l);
    let mut cls = Vec::with_capacity(l);
    for _ in 0..l {
        let t: Vec<f64> = floats.by_ref().take(n * c).collect();
        let k: Vec<f64> = floats.by_ref().take(c).collect();
        tokens.push(Tensor::matrix(n, c, t)?);
        cls.push(Tensor::matrix(1, c, k)?);
    }
    FeatureStack::new(tokens, cls, (rows, cols))
}

pub fn dump_features(stack: &FeatureStack, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(stack, &mut file).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureStack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes)
}
