//! Latent codec for the toy path.
//!
//! Factor-4 space-to-depth followed by a fixed signed permutation of the 48
//! patch values. A signed permutation is orthogonal and, unlike a dense
//! orthogonal matrix, inverts bit-exactly in floating point, which is what
//! makes the round-trip tests tolerance-free.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuf;
use crate::seed::derive_seed;

pub const DOWN_FACTOR: usize = 4;
pub const LATENT_CHANNELS: usize = 3 * DOWN_FACTOR * DOWN_FACTOR;

#[derive(Debug, Clone)]
pub struct LatentCodec {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    signs: Vec<f64>,
}

impl LatentCodec {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "latent-codec"));
        let mut perm: Vec<usize> = (0..LATENT_CHANNELS).collect();
        perm.shuffle(&mut rng);
        let signs: Vec<f64> = (0..LATENT_CHANNELS)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut inv_perm = vec![0usize; LATENT_CHANNELS];
        for (i, &p) in perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        LatentCodec {
            perm,
            inv_perm,
            signs,
        }
    }

    pub fn latent_channels(&self) -> usize {
        LATENT_CHANNELS
    }

    /// Latent grid for an image of the given size.
    pub fn latent_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % DOWN_FACTOR != 0 || width % DOWN_FACTOR != 0 {
            return Err(Error::CodecDimensions {
                width,
                height,
                factor: DOWN_FACTOR,
            });
        }
        Ok((height / DOWN_FACTOR, width / DOWN_FACTOR))
    }

    pub fn encode(&self, image: &ImageBuf) -> Result<Array3<f64>> {
        let (h, w) = (image.height(), image.width());
        let (lh, lw) = self.latent_size(h, w)?;
        let data = image.data();
        let mut z = Array3::zeros((LATENT_CHANNELS, lh, lw));
        for y in 0..lh {
            for x in 0..lw {
                for ch in 0..LATENT_CHANNELS {
                    let src = self.perm[ch];
                    let (c, dy, dx) = unflatten(src);
                    z[[ch, y, x]] = self.signs[ch]
                        * data[[c, y * DOWN_FACTOR + dy, x * DOWN_FACTOR + dx]];
                }
            }
        }
        Ok(z)
    }

    pub fn decode(&self, latent: &Array3<f64>) -> Result<ImageBuf> {
        let (c, lh, lw) = latent.dim();
        if c != LATENT_CHANNELS {
            return Err(Error::shape(
                "LatentCodec::decode",
                format!("({LATENT_CHANNELS}, h, w)"),
                format!("{:?}", latent.dim()),
            ));
        }
        let mut img = ImageBuf::zeros(lh * DOWN_FACTOR, lw * DOWN_FACTOR);
        let data = img.data_mut();
        for y in 0..lh {
            for x in 0..lw {
                for src in 0..LATENT_CHANNELS {
                    let ch = self.inv_perm[src];
                    let (c, dy, dx) = unflatten(src);
                    data[[c, y * DOWN_FACTOR + dy, x * DOWN_FACTOR + dx]] =
                        self.signs[ch] * latent[[ch, y, x]];
                }
            }
        }
        Ok(img)
    }
}

fn unflatten(idx: usize) -> (usize, usize, usize) {
    let c = idx / (DOWN_FACTOR * DOWN_FACTOR);
    let rest = idx % (DOWN_FACTOR * DOWN_FACTOR);
    (c, rest / DOWN_FACTOR, rest % DOWN_FACTOR)
}
