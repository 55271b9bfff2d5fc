//! Seeded foreground segmentation by exact graph cut.
//!
//! Every pixel is a node; adjacent pixels are joined by n-links whose
//! capacity falls off with color difference, round(Q * exp(-||dc||^2 /
//! (2 sigma^2))). Foreground seeds connect to the source and background
//! seeds to the sink with a capacity no cut of n-links can afford, making
//! them hard constraints. The foreground mask is the source side of a
//! minimum cut (the source-maximal one — see [`crate::maxflow`]).
//!
//! Seeding encodes the prior that the object sits centered on a frame of
//! background: K foreground seeds are sampled from a disk around the image
//! center (border pixels excluded, so the two pools stay disjoint), and
//! every border pixel is a background seed.
//!
//! Capacities are integers, so the cut is exact and byte-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::maxflow::FlowNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone)]
pub struct SegmenterParams {
    /// Color-difference scale in the n-link weight.
    pub sigma: f64,
    /// Quantization constant Q; weights in (0,1] become integer capacities
    /// round(Q * w).
    pub quantization: f64,
    pub connectivity: Connectivity,
    /// Foreground seed disk radius as a fraction of min(height, width),
    /// in (0, 0.5].
    pub seed_radius: f64,
    /// Number of foreground seeds drawn from the disk.
    pub seed_count: usize,
}

impl Default for SegmenterParams {
    fn default() -> Self {
        SegmenterParams {
            sigma: 0.1,
            quantization: 10_000.0,
            connectivity: Connectivity::Four,
            seed_radius: 0.15,
            seed_count: 25,
        }
    }
}

impl SegmenterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::invalid_param("sigma", format!("{} (need > 0)", self.sigma)));
        }
        if !(self.quantization.is_finite()
            && self.quantization >= 1.0
            && self.quantization <= 1e12
            && self.quantization.fract() == 0.0)
        {
            return Err(Error::invalid_param(
                "quantization",
                format!("{} (need an integer in [1, 1e12])", self.quantization),
            ));
        }
        if !(self.seed_radius.is_finite() && self.seed_radius > 0.0 && self.seed_radius <= 0.5) {
            return Err(Error::invalid_param(
                "seed_radius",
                format!("{} (need in (0, 0.5])", self.seed_radius),
            ));
        }
        if self.seed_count == 0 {
            return Err(Error::invalid_param("seed_count", "0 (need >= 1)"));
        }
        Ok(())
    }
}

/// Disjoint, in-bounds foreground and background seed pixels as (y, x).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSet {
    foreground: Vec<(usize, usize)>,
    background: Vec<(usize, usize)>,
}

impl SeedSet {
    pub fn new(
        height: usize,
        width: usize,
        foreground: Vec<(usize, usize)>,
        background: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if foreground.is_empty() || background.is_empty() {
            return Err(Error::invalid_param(
                "seeds",
                "both terminals need at least one seed",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, list) in [("foreground", &foreground), ("background", &background)] {
            for &(y, x) in list {
                if y >= height || x >= width {
                    return Err(Error::invalid_param(
                        "seeds",
                        format!("{name} seed ({y}, {x}) outside {height}x{width}"),
                    ));
                }
                if !seen.insert((y, x)) {
                    return Err(Error::invalid_param(
                        "seeds",
                        format!("pixel ({y}, {x}) appears twice across the seed lists"),
                    ));
                }
            }
        }
        Ok(SeedSet {
            foreground,
            background,
        })
    }

    pub fn foreground(&self) -> &[(usize, usize)] {
        &self.foreground
    }

    pub fn background(&self) -> &[(usize, usize)] {
        &self.background
    }
}

/// Integer n-link capacity between two pixel colors.
pub fn n_link_capacity(a: &[f64], b: &[f64], sigma: f64, quantization: f64) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let w = (-d2 / (2.0 * sigma * sigma)).exp();
    (quantization * w).round() as i64
}

/// Draws `seed_count` distinct foreground seeds uniformly from the disk of
/// radius `seed_radius * min(h, w)` around the image center, and takes every
/// border pixel as a background seed. Border pixels are excluded from the
/// disk pool so the two sets cannot collide at large radii. Deterministic in
/// `rng_seed`.
pub fn sample_center_seeds(
    height: usize,
    width: usize,
    params: &SegmenterParams,
    rng_seed: u64,
) -> Result<SeedSet> {
    params.validate()?;
    if height < 3 || width < 3 {
        return Err(Error::invalid_param(
            "image size",
            format!("{height}x{width} (need at least 3x3 to seed)"),
        ));
    }
    let r = params.seed_radius * height.min(width) as f64;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let border = |y: usize, x: usize| y == 0 || x == 0 || y == height - 1 || x == width - 1;

    let mut fg_pool = Vec::new();
    let mut bg = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if border(y, x) {
                bg.push((y, x));
            } else {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r {
                    fg_pool.push((y, x));
                }
            }
        }
    }
    if fg_pool.len() < params.seed_count {
        return Err(Error::invalid_param(
            "seed_count",
            format!(
                "{} requested but the radius-{r:.3} center disk of a {height}x{width} image holds \
                 only {} usable pixels; lower seed_count to at most that, or raise seed_radius",
                params.seed_count,
                fg_pool.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let foreground = sample_without_replacement(&mut fg_pool, params.seed_count, &mut rng);
    SeedSet::new(height, width, foreground, bg)
}

/// Partial Fisher-Yates over `pool`, returning k items sorted row-major.
/// Spelled out here (rather than via a library sampler) so the draw pattern
/// is pinned by this crate.
fn sample_without_replacement(
    pool: &mut [(usize, usize)],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    debug_assert!(k <= pool.len());
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

fn offsets(connectivity: Connectivity) -> &'static [(isize, isize)] {
    match connectivity {
        Connectivity::Four => &[(0, 1), (1, 0)],
        Connectivity::Eight => &[(0, 1), (1, 0), (1, 1), (1, -1)],
    }
}

/// Builds the segmentation network: pixel nodes 0..h*w (row-major), source
/// h*w, sink h*w+1. n-links are added in both directions; terminal links get
/// capacity Q * pixel_count * max(n-link capacity, 1), which exceeds any cut
/// of n-links and therefore acts as a hard constraint.
pub fn build_graph(image: &Image, seeds: &SeedSet, params: &SegmenterParams) -> Result<FlowNetwork> {
    params.validate()?;
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let px = h * w;
    let node = |y: usize, x: usize| y * w + x;
    let color = |y: usize, x: usize| -> Vec<f64> { (0..ch).map(|c| image.get(y, x, c)).collect() };

    let mut net = FlowNetwork::new(px + 2, px, px + 1)?;
    let mut max_n = 0i64;
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx) in offsets(params.connectivity) {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                let cap =
                    n_link_capacity(&color(y, x), &color(ny, nx), params.sigma, params.quantization);
                max_n = max_n.max(cap);
                net.add_edge(node(y, x), node(ny, nx), cap)?;
                net.add_edge(node(ny, nx), node(y, x), cap)?;
            }
        }
    }

    let tcap_wide = params.quantization as i128 * px as i128 * max_n.max(1) as i128;
    let seed_links = (seeds.foreground().len() + seeds.background().len()) as i128;
    if tcap_wide * seed_links.max(1) > i64::MAX as i128 / 4 {
        return Err(Error::Invalid(format!(
            "terminal capacity {tcap_wide} too large for exact arithmetic; reduce quantization or image size"
        )));
    }
    let tcap = tcap_wide as i64;
    for &(y, x) in seeds.foreground() {
        net.add_edge(px, node(y, x), tcap)?;
    }
    for &(y, x) in seeds.background() {
        net.add_edge(node(y, x), px + 1, tcap)?;
    }
    Ok(net)
}

/// Segments `image` into a foreground mask. Deterministic in (image, params,
/// rng_seed). The returned mask always contains every foreground seed and no
/// background seed.
pub fn segment(image: &Image, params: &SegmenterParams, rng_seed: u64) -> Result<Mask> {
    let seeds = sample_center_seeds(image.height(), image.width(), params, rng_seed)?;
    segment_with_seeds(image, &seeds, params)
}

/// Segmentation with caller-provided seeds.
pub fn segment_with_seeds(image: &Image, seeds: &SeedSet, params: &SegmenterParams) -> Result<Mask> {
    let mut net = build_graph(image, seeds, params)?;
    let cut = net.max_flow();
    let w = image.width();
    let bits = cut.source_side[..image.height() * w].to_vec();
    let mask = Mask::new(image.height(), w, bits)?;
    for &(y, x) in seeds.foreground() {
        if !mask.get(y, x) {
            return Err(Error::Invalid(format!(
                "cut separated foreground seed ({y}, {x}) from the source; terminal capacities are wrong"
            )));
        }
    }
    for &(y, x) in seeds.background() {
        if mask.get(y, x) {
            return Err(Error::Invalid(format!(
                "cut kept background seed ({y}, {x}) on the source side; terminal capacities are wrong"
            )));
        }
    }
    Ok(mask)
}
