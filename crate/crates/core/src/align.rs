//! Stain alignment: every client re-renders its images with stain matrices
//! drawn from all clients' distributions.
//!
//! A client's images are split at random into `K` near-equal blocks. Each
//! image is separated into `(w, h)`, the fitted `w` is discarded, and the
//! image is rebuilt from its own `h` and a fresh stain matrix sampled under
//! the block's condition. Structure lives in `h`, so it is untouched; only
//! color changes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffusion::{sample_many, DiffusionModel};
use crate::rng::{derive, Domain};
use crate::stain::{
    reconstruct_with_illuminant, separate, RgbImage, SeparationParams, StainMatrix,
};
use crate::{Error, Result};

/// Source of stain matrices for a target condition.
pub trait StainGenerator: Sync {
    fn num_conditions(&self) -> usize;

    /// One matrix per entry of `images` (indices into the client's image
    /// list), all drawn under `condition`.
    fn draw(
        &self,
        condition: usize,
        images: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StainMatrix>>;
}

impl StainGenerator for DiffusionModel {
    fn num_conditions(&self) -> usize {
        DiffusionModel::num_conditions(self)
    }

    fn draw(
        &self,
        condition: usize,
        images: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<StainMatrix>> {
        sample_many(self, condition, images.len(), rng)
    }
}

/// Random split of `0..n` into `k` blocks whose sizes differ by at most one.
///
/// Indices are shuffled and dealt round-robin, so the first `n % k` blocks
/// get the extra element. Each block is returned sorted.
pub fn make_partition<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "partition needs at least one block".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut blocks = vec![Vec::with_capacity(n / k + 1); k];
    for (i, idx) in order.into_iter().enumerate() {
        blocks[i % k].push(idx);
    }
    blocks.iter_mut().for_each(|b| b.sort_unstable());
    Ok(blocks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPlan {
    pub client_id: usize,
    /// `partition[j]` holds the images re-rendered under condition `j + 1`.
    pub partition: Vec<Vec<usize>>,
    /// Stain matrix used for each image; `None` where separation failed and
    /// the image passed through unchanged.
    pub sampled_w: Vec<Option<StainMatrix>>,
    pub seed: u64,
}

impl AlignmentPlan {
    /// One-based target condition of every image.
    pub fn target_conditions(&self) -> Vec<usize> {
        let n = self.sampled_w.len();
        let mut out = vec![0; n];
        for (j, block) in self.partition.iter().enumerate() {
            for &i in block {
                out[i] = j + 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub images: Vec<RgbImage>,
    pub plan: AlignmentPlan,
}

/// Aligns one client's images to the federation-wide stain distribution.
///
/// Separation failures are logged and the affected image is returned as is.
pub fn align_client<G: StainGenerator + ?Sized>(
    images: &[RgbImage],
    generator: &G,
    client_id: usize,
    k: usize,
    seed: u64,
    params: &SeparationParams,
) -> Result<Alignment> {
    if k == 0 || k > generator.num_conditions() {
        return Err(Error::InvalidArgument(format!(
            "cannot align to {k} conditions with a generator of {}",
            generator.num_conditions()
        )));
    }
    params.validate()?;
    let partition = make_partition(
        images.len(),
        k,
        &mut derive(seed, Domain::Partition, client_id as u64, 0),
    )?;
    let separations: Vec<_> = images
        .par_iter()
        .map(|img| separate(img, params).map(|s| s.density))
        .collect();
    for (i, sep) in separations.iter().enumerate() {
        if let Err(e) = sep {
            log::warn!("client {client_id} image {i}: separation failed ({e}); passing through");
        }
    }

    let mut sampled_w = vec![None; images.len()];
    for (j, block) in partition.iter().enumerate() {
        let ok: Vec<usize> = block
            .iter()
            .copied()
            .filter(|&i| separations[i].is_ok())
            .collect();
        if ok.is_empty() {
            continue;
        }
        let mut rng = derive(seed, Domain::AlignSample, client_id as u64, j as u64 + 1);
        let drawn = generator.draw(j + 1, &ok, &mut rng)?;
        if drawn.len() != ok.len() {
            return Err(Error::Shape(format!(
                "generator returned {} matrices for {} images",
                drawn.len(),
                ok.len()
            )));
        }
        for (i, w) in ok.into_iter().zip(drawn) {
            sampled_w[i] = Some(w);
        }
    }

    let out = images
        .par_iter()
        .zip(&separations)
        .zip(&sampled_w)
        .map(|((img, sep), w)| match (sep, w) {
            (Ok(h), Some(w)) => {
                reconstruct_with_illuminant(w, h, img.width(), img.height(), img.illuminant())
            }
            _ => Ok(img.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Alignment {
        images: out,
        plan: AlignmentPlan {
            client_id,
            partition,
            sampled_w,
            seed,
        },
    })
}
