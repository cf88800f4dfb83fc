//! `PFW1` weight files: magic, config block, then named tensors stored as
//! little-endian `f32`.

use std::io::{Read, Write};

use super::{EncoderConfig, EncoderMode, EncoderParams};
use crate::autodiff::Tensor;
use crate::error::{bail, Result};
use crate::io::{expect_magic, get_f32, get_str, get_u32, get_u64, put_f32, put_str, put_u32, put_u64};

const MAGIC: &[u8; 4] = b"PFW1";

/// Encoder weights plus any extra named scalars (such as the learned
/// softmax scale) and the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub mode: EncoderMode,
    pub seed: u64,
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        let c = self.params.config();
        w.write_all(MAGIC)?;
        for v in [c.layers, c.heads, c.hidden_dim, c.ffn_dim, c.max_seq, c.vocab_size] {
            put_u32(w, v as u32)?;
        }
        put_f32(w, c.dropout as f32)?;
        put_u32(w, matches!(self.mode, EncoderMode::Siso) as u32)?;
        put_u64(w, self.seed)?;
        let named = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .chain(self.extras.iter().map(|(n, t)| (n, t)));
        put_u32(w, (self.params.tensors().len() + self.extras.len()) as u32)?;
        for (name, t) in named {
            put_str(w, name)?;
            put_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u32(w, d as u32)?;
            }
            for &v in t.data() {
                put_f32(w, v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> Result<Self> {
        expect_magic(r, MAGIC)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = get_u32(r)? as usize;
        }
        let [layers, heads, hidden_dim, ffn_dim, max_seq, vocab_size] = dims;
        let config = EncoderConfig {
            layers,
            heads,
            hidden_dim,
            ffn_dim,
            max_seq,
            vocab_size,
            dropout: get_f32(r)? as f64,
        };
        let mode = match get_u32(r)? {
            0 => EncoderMode::Simo,
            1 => EncoderMode::Siso,
            m => bail!(Format, "unknown encoder mode {m}"),
        };
        let seed = get_u64(r)?;
        let count = get_u32(r)? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let name = get_str(r)?;
            let ndim = get_u32(r)? as usize;
            if ndim > 8 {
                bail!(Format, "tensor {name} has {ndim} dimensions");
            }
            let shape: Vec<usize> = (0..ndim)
                .map(|_| get_u32(r).map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| get_f32(r).map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            named.push((name, Tensor::new(shape, data)?));
        }
        let n_enc = super::layout(&config).len();
        if named.len() < n_enc {
            bail!(Format, "checkpoint holds {} tensors, encoder needs {n_enc}", named.len());
        }
        let extras = named.split_off(n_enc);
        Ok(Checkpoint {
            params: EncoderParams::from_named(config, named)?,
            mode,
            seed,
            extras,
        })
    }
}
