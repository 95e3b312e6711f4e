//! Reference multi-scale deformable attention for a single head and query.
//!
//! The output is `Σ_m Σ_n A_mn · W_mn · f_m(x_mn)`, summed level-major.
//! `x_mn = reference_m + offset_mn` in level-local grid coordinates, where
//! cell `(i, j)` is centred on the integer point `(x = j, y = i)`. Features
//! are read by bilinear interpolation and neighbours outside the grid read
//! as zero. `A` is a softmax over all `M·N` logits jointly. An optional
//! shared output map is applied to the sum.
//!
//! Everything runs in `f64`. [`deformable_attention`] is the fused kernel,
//! [`naive_oracle`] evaluates the same sum with plain scalar loops, and
//! [`gradcheck`] compares the hand-derived gradients of `‖output‖²` with
//! central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sampling coordinates must be at least this far from an integer when
/// differentiating with respect to offsets.
pub const MIN_BOUNDARY_DISTANCE: f64 = 1e-3;

/// Denominator floor of the relative error, so that vanishing gradients are
/// compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeformError {
    #[error("{what}: non-finite value")]
    NonFinite { what: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{coordinate} = {value} lies within {} of a cell boundary", MIN_BOUNDARY_DISTANCE)]
    NearBoundary { coordinate: String, value: f64 },
    #[error("finite-difference step {0} must be positive and below {MIN_BOUNDARY_DISTANCE}")]
    Step(f64),
    #[error("fixture: {0}")]
    Fixture(String),
}

type Result<T> = std::result::Result<T, DeformError>;

fn check_finite(values: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DeformError::NonFinite { what: what() })
    }
}

/// One feature map, stored row-major as `(y·W + x)·C + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLevel", into = "RawLevel")]
pub struct FeatureLevel {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawLevel {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl TryFrom<RawLevel> for FeatureLevel {
    type Error = DeformError;
    fn try_from(r: RawLevel) -> Result<Self> {
        FeatureLevel::new(r.height, r.width, r.channels, r.values)
    }
}

impl From<FeatureLevel> for RawLevel {
    fn from(l: FeatureLevel) -> Self {
        RawLevel { height: l.height, width: l.width, channels: l.channels, values: l.values }
    }
}

impl FeatureLevel {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DeformError::Shape(format!("level {height}x{width}x{channels} has an empty dimension")));
        }
        if values.len() != height * width * channels {
            return Err(DeformError::Shape(format!(
                "level {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        check_finite(&values, || "feature level".into())?;
        Ok(FeatureLevel { height, width, channels, values })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                values.extend((0..channels).map(|c| f(y, x, c)));
            }
        }
        FeatureLevel::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Level-local location of a normalized `[0, 1]²` point. The unit
    /// square spans the outer cell edges, so `(0.5, 0.5)` is the map centre
    /// on every level.
    pub fn from_normalized(&self, u: f64, v: f64) -> [f64; 2] {
        [u * self.width as f64 - 0.5, v * self.height as f64 - 0.5]
    }

    fn contains(&self, cx: f64, cy: f64) -> bool {
        cx >= 0.0 && cy >= 0.0 && cx <= (self.width - 1) as f64 && cy <= (self.height - 1) as f64
    }
}

/// The four grid neighbours of a location with their bilinear weights and
/// the weights' partial derivatives along x and y. Neighbours outside the
/// grid are omitted.
struct Stencil {
    corners: [(usize, usize, f64, f64, f64); 4],
    len: usize,
}

impl Stencil {
    fn new(level: &FeatureLevel, loc: [f64; 2]) -> Stencil {
        let (x0, y0) = (loc[0].floor(), loc[1].floor());
        let (fx, fy) = (loc[0] - x0, loc[1] - y0);
        let candidates = [
            (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (x0 + 1.0, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (x0, y0 + 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (x0 + 1.0, y0 + 1.0, fx * fy, fy, fx),
        ];
        let mut s = Stencil { corners: [(0, 0, 0.0, 0.0, 0.0); 4], len: 0 };
        for (cx, cy, w, dx, dy) in candidates {
            if level.contains(cx, cy) {
                s.corners[s.len] = (cy as usize, cx as usize, w, dx, dy);
                s.len += 1;
            }
        }
        s
    }

    fn iter(&self) -> impl Iterator<Item = &(usize, usize, f64, f64, f64)> {
        self.corners[..self.len].iter()
    }
}

/// Bilinear read of all channels at a continuous location, zero outside the grid.
pub fn bilinear_sample(level: &FeatureLevel, loc: [f64; 2]) -> Result<Vec<f64>> {
    check_finite(&loc, || format!("sampling location ({}, {})", loc[0], loc[1]))?;
    let mut out = vec![0.0; level.channels];
    for &(y, x, w, _, _) in Stencil::new(level, loc).iter() {
        for (o, v) in out.iter_mut().zip(level.cell(y, x)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Joint softmax over every logit of an `M×N` table.
pub fn normalize_weights(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<Vec<f64>> = logits.iter().map(|row| row.iter().map(|l| (l - max).exp()).collect()).collect();
    let total: f64 = exp.iter().flatten().sum();
    exp.into_iter().map(|row| row.into_iter().map(|e| e / total).collect()).collect()
}

/// Dense row-major matrix, serialized as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = DeformError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DeformError::Shape("ragged matrix rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.data.chunks(m.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(DeformError::Shape(format!("{rows}x{cols} matrix with {} entries", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Matrix {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Matrix { rows: n, cols: n, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    fn mul_vec_transposed(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inputs of one attention evaluation. Offsets and logits are the
/// query-conditioned quantities and are supplied directly; `query` is
/// carried for fixtures and does not enter the sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableAttentionInstance {
    pub query: Vec<f64>,
    pub levels: Vec<FeatureLevel>,
    /// One `[x, y]` per level, in that level's grid coordinates.
    pub reference_points: Vec<[f64; 2]>,
    /// `M×N` displacements `[dx, dy]` from the level's reference point.
    pub offsets: Vec<Vec<[f64; 2]>>,
    /// `M×N` unnormalized attention scores.
    pub logits: Vec<Vec<f64>>,
    /// `M×N` maps from `C` to `C_out`.
    pub projections: Vec<Vec<Matrix>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_projection: Option<Matrix>,
}

impl DeformableAttentionInstance {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_points(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, FeatureLevel::channels)
    }

    /// Width of the per-point projections.
    pub fn projected_channels(&self) -> usize {
        self.projections.first().and_then(|r| r.first()).map_or(0, Matrix::rows)
    }

    pub fn output_channels(&self) -> usize {
        self.output_projection.as_ref().map_or(self.projected_channels(), Matrix::rows)
    }

    pub fn sampling_location(&self, m: usize, n: usize) -> [f64; 2] {
        let (r, d) = (self.reference_points[m], self.offsets[m][n]);
        [r[0] + d[0], r[1] + d[1]]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.levels.len();
        if m == 0 {
            return Err(DeformError::Shape("no feature levels".into()));
        }
        let n = self.num_points();
        if n == 0 {
            return Err(DeformError::Shape("no sampling points".into()));
        }
        let c = self.channels();
        if let Some((i, l)) = self.levels.iter().enumerate().find(|(_, l)| l.channels != c) {
            return Err(DeformError::Shape(format!("level {i} has {} channels, level 0 has {c}", l.channels)));
        }
        if self.reference_points.len() != m {
            return Err(DeformError::Shape(format!("{} reference points for {m} levels", self.reference_points.len())));
        }
        for (name, rows) in [
            ("offsets", self.offsets.iter().map(Vec::len).collect::<Vec<_>>()),
            ("logits", self.logits.iter().map(Vec::len).collect()),
            ("projections", self.projections.iter().map(Vec::len).collect()),
        ] {
            if rows.len() != m || rows.iter().any(|&len| len != n) {
                return Err(DeformError::Shape(format!("{name} must be {m}x{n}")));
            }
        }
        let c_out = self.projected_channels();
        for (mi, row) in self.projections.iter().enumerate() {
            for (ni, w) in row.iter().enumerate() {
                if w.cols != c || w.rows != c_out {
                    return Err(DeformError::Shape(format!(
                        "projections[{mi}][{ni}] is {}x{}, expected {c_out}x{c}",
                        w.rows, w.cols
                    )));
                }
                check_finite(&w.data, || format!("projections[{mi}][{ni}]"))?;
            }
        }
        if let Some(wo) = &self.output_projection {
            if wo.cols != c_out {
                return Err(DeformError::Shape(format!("output projection takes {} inputs, expected {c_out}", wo.cols)));
            }
            check_finite(&wo.data, || "output projection".into())?;
        }
        check_finite(&self.query, || "query".into())?;
        check_finite(&self.reference_points.concat(), || "reference points".into())?;
        for mi in 0..m {
            check_finite(&self.offsets[mi].concat(), || format!("offsets[{mi}]"))?;
            check_finite(&self.logits[mi], || format!("logits[{mi}]"))?;
            for ni in 0..n {
                let loc = self.sampling_location(mi, ni);
                check_finite(&loc, || format!("sampling location [{mi}][{ni}]"))?;
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let inst: Self = serde_json::from_str(s).map_err(|e| DeformError::Fixture(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }
}

/// Fused evaluation: the attention weight is folded into the bilinear
/// weights so each point costs one projection of an already-weighted sample.
pub fn deformable_attention(inst: &DeformableAttentionInstance) -> Result<Vec<f64>> {
    inst.validate()?;
    Ok(forward(inst).output)
}

struct Forward {
    weights: Vec<Vec<f64>>,
    /// Bilinear samples `b_mn`.
    samples: Vec<Vec<Vec<f64>>>,
    /// `Σ A_mn W_mn b_mn`, before the output map.
    sum: Vec<f64>,
    output: Vec<f64>,
}

fn forward(inst: &DeformableAttentionInstance) -> Forward {
    let weights = normalize_weights(&inst.logits);
    let c = inst.channels();
    let mut sum = vec![0.0; inst.projected_channels()];
    let mut samples = Vec::with_capacity(inst.num_levels());
    let mut weighted = vec![0.0; c];
    for (m, level) in inst.levels.iter().enumerate() {
        let mut level_samples = Vec::with_capacity(inst.num_points());
        for (n, &a) in weights[m].iter().enumerate() {
            let mut b = vec![0.0; c];
            weighted.fill(0.0);
            for &(y, x, w, _, _) in Stencil::new(level, inst.sampling_location(m, n)).iter() {
                let aw = a * w;
                for ((wt, bv), v) in weighted.iter_mut().zip(b.iter_mut()).zip(level.cell(y, x)) {
                    *wt += aw * v;
                    *bv += w * v;
                }
            }
            for (s, p) in sum.iter_mut().zip(inst.projections[m][n].mul_vec(&weighted)) {
                *s += p;
            }
            level_samples.push(b);
        }
        samples.push(level_samples);
    }
    let output = match &inst.output_projection {
        Some(wo) => wo.mul_vec(&sum),
        None => sum.clone(),
    };
    Forward { weights, samples, sum, output }
}

/// Scalar-loop evaluation of the same sum, with its own softmax and
/// per-channel interpolation.
pub fn naive_oracle(inst: &DeformableAttentionInstance) -> Result<Vec<f64>> {
    inst.validate()?;
    let (m_count, n_count) = (inst.num_levels(), inst.num_points());
    let mut max = f64::NEG_INFINITY;
    for m in 0..m_count {
        for n in 0..n_count {
            if inst.logits[m][n] > max {
                max = inst.logits[m][n];
            }
        }
    }
    let mut total = 0.0;
    for m in 0..m_count {
        for n in 0..n_count {
            total += (inst.logits[m][n] - max).exp();
        }
    }
    let c_in = inst.channels();
    let c_proj = inst.projected_channels();
    let mut sum = vec![0.0; c_proj];
    for m in 0..m_count {
        let level = &inst.levels[m];
        for n in 0..n_count {
            let a = (inst.logits[m][n] - max).exp() / total;
            let x = inst.reference_points[m][0] + inst.offsets[m][n][0];
            let y = inst.reference_points[m][1] + inst.offsets[m][n][1];
            let mut f = vec![0.0; c_in];
            for (c, fc) in f.iter_mut().enumerate() {
                *fc = interpolate_channel(level, x, y, c);
            }
            let w = &inst.projections[m][n];
            for (o, s) in sum.iter_mut().enumerate() {
                let mut proj = 0.0;
                for (c, fc) in f.iter().enumerate() {
                    proj += w.get(o, c) * fc;
                }
                *s += a * proj;
            }
        }
    }
    Ok(match &inst.output_projection {
        None => sum,
        Some(wo) => (0..wo.rows)
            .map(|o| {
                let mut acc = 0.0;
                for (c, s) in sum.iter().enumerate() {
                    acc += wo.get(o, c) * s;
                }
                acc
            })
            .collect(),
    })
}

fn interpolate_channel(level: &FeatureLevel, x: f64, y: f64, c: usize) -> f64 {
    let read = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi > (level.width - 1) as f64 || yi > (level.height - 1) as f64 {
            0.0
        } else {
            level.values[((yi as usize) * level.width + xi as usize) * level.channels + c]
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let top = (1.0 - tx) * read(x0, y0) + tx * read(x0 + 1.0, y0);
    let bottom = (1.0 - tx) * read(x0, y0 + 1.0) + tx * read(x0 + 1.0, y0 + 1.0);
    (1.0 - ty) * top + ty * bottom
}

/// Squared norm of the output.
pub fn loss(inst: &DeformableAttentionInstance) -> Result<f64> {
    Ok(deformable_attention(inst)?.iter().map(|v| v * v).sum())
}

/// Gradients of `‖output‖²`, shaped like the corresponding inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub logits: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<[f64; 2]>>,
    /// One flat buffer per level in the level's storage order.
    pub features: Vec<Vec<f64>>,
    pub projections: Vec<Vec<Matrix>>,
    pub output_projection: Option<Matrix>,
}

pub fn gradients(inst: &DeformableAttentionInstance) -> Result<Gradients> {
    inst.validate()?;
    let fw = forward(inst);
    let dout: Vec<f64> = fw.output.iter().map(|o| 2.0 * o).collect();
    let (g, output_projection) = match &inst.output_projection {
        Some(wo) => {
            let mut d = Matrix::zeros(wo.rows, wo.cols);
            for (r, dr) in dout.iter().enumerate() {
                for (c, s) in fw.sum.iter().enumerate() {
                    d.data[r * wo.cols + c] = dr * s;
                }
            }
            (wo.mul_vec_transposed(&dout), Some(d))
        }
        None => (dout, None),
    };

    let (m_count, n_count) = (inst.num_levels(), inst.num_points());
    let mut d_weights = vec![vec![0.0; n_count]; m_count];
    let mut offsets = vec![vec![[0.0; 2]; n_count]; m_count];
    let mut features: Vec<Vec<f64>> = inst.levels.iter().map(|l| vec![0.0; l.values.len()]).collect();
    let mut projections = Vec::with_capacity(m_count);
    for (m, level) in inst.levels.iter().enumerate() {
        let mut row = Vec::with_capacity(n_count);
        for n in 0..n_count {
            let (a, b, w) = (fw.weights[m][n], &fw.samples[m][n], &inst.projections[m][n]);
            let mut dw = Matrix::zeros(w.rows, w.cols);
            for (o, go) in g.iter().enumerate() {
                for (c, bc) in b.iter().enumerate() {
                    dw.data[o * w.cols + c] = a * go * bc;
                }
            }
            row.push(dw);
            d_weights[m][n] = dot(&g, &w.mul_vec(b));
            // gradient reaching the sample b_mn
            let v: Vec<f64> = w.mul_vec_transposed(&g).into_iter().map(|x| a * x).collect();
            let c = level.channels;
            for &(y, x, bw, dx, dy) in Stencil::new(level, inst.sampling_location(m, n)).iter() {
                let start = (y * level.width + x) * c;
                let cell = level.cell(y, x);
                let vf = dot(&v, cell);
                offsets[m][n][0] += dx * vf;
                offsets[m][n][1] += dy * vf;
                for (df, vc) in features[m][start..start + c].iter_mut().zip(&v) {
                    *df += bw * vc;
                }
            }
        }
        projections.push(row);
    }
    let mean: f64 = (0..m_count).flat_map(|m| (0..n_count).map(move |n| (m, n))).map(|(m, n)| fw.weights[m][n] * d_weights[m][n]).sum();
    let logits = (0..m_count)
        .map(|m| (0..n_count).map(|n| fw.weights[m][n] * (d_weights[m][n] - mean)).collect())
        .collect();
    Ok(Gradients { logits, offsets, features, projections, output_projection })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wrt {
    Logits,
    Offsets,
    Features,
    /// The per-point maps and, when present, the output map.
    Projections,
}

impl Wrt {
    pub const ALL: [Wrt; 4] = [Wrt::Logits, Wrt::Offsets, Wrt::Features, Wrt::Projections];

    pub fn name(self) -> &'static str {
        match self {
            Wrt::Logits => "logits",
            Wrt::Offsets => "offsets",
            Wrt::Features => "features",
            Wrt::Projections => "projections",
        }
    }
}

impl std::fmt::Display for Wrt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Gradients {
    /// Entries for `wrt` in the order used by [`gradcheck`].
    pub fn flatten(&self, wrt: Wrt) -> Vec<f64> {
        match wrt {
            Wrt::Logits => self.logits.concat(),
            Wrt::Offsets => self.offsets.iter().flatten().flatten().copied().collect(),
            Wrt::Features => self.features.concat(),
            Wrt::Projections => self
                .projections
                .iter()
                .flatten()
                .chain(&self.output_projection)
                .flat_map(|w| w.data.iter().copied())
                .collect(),
        }
    }
}

fn param_count(inst: &DeformableAttentionInstance, wrt: Wrt) -> usize {
    let mn = inst.num_levels() * inst.num_points();
    match wrt {
        Wrt::Logits => mn,
        Wrt::Offsets => 2 * mn,
        Wrt::Features => inst.levels.iter().map(|l| l.values.len()).sum(),
        Wrt::Projections => {
            inst.projections.iter().flatten().chain(&inst.output_projection).map(|w| w.data.len()).sum()
        }
    }
}

fn param_mut(inst: &mut DeformableAttentionInstance, wrt: Wrt, mut i: usize) -> (&mut f64, String) {
    let n_count = inst.num_points();
    match wrt {
        Wrt::Logits => {
            let (m, n) = (i / n_count, i % n_count);
            (&mut inst.logits[m][n], format!("logits[{m}][{n}]"))
        }
        Wrt::Offsets => {
            let (m, n, axis) = (i / 2 / n_count, i / 2 % n_count, i % 2);
            (&mut inst.offsets[m][n][axis], format!("offsets[{m}][{n}].{}", ["x", "y"][axis]))
        }
        Wrt::Features => {
            for (m, level) in inst.levels.iter_mut().enumerate() {
                let len = level.values.len();
                if i < len {
                    let c = level.channels;
                    let (cell, ch) = (i / c, i % c);
                    let label = format!("features[{m}][y={}][x={}][c={ch}]", cell / level.width, cell % level.width);
                    return (&mut level.values_mut()[i], label);
                }
                i -= len;
            }
            unreachable!("feature index out of range")
        }
        Wrt::Projections => {
            for (m, row) in inst.projections.iter_mut().enumerate() {
                for (n, w) in row.iter_mut().enumerate() {
                    if i < w.data.len() {
                        let label = format!("projections[{m}][{n}][{}][{}]", i / w.cols, i % w.cols);
                        return (&mut w.data[i], label);
                    }
                    i -= w.data.len();
                }
            }
            let wo = inst.output_projection.as_mut().expect("projection index out of range");
            let label = format!("output_projection[{}][{}]", i / wo.cols, i % wo.cols);
            (&mut wo.data[i], label)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub wrt: Wrt,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<String>,
}

/// Rejects offsets whose sampling coordinate sits near a kink of the
/// interpolant.
pub fn check_offsets_interior(inst: &DeformableAttentionInstance) -> Result<()> {
    for m in 0..inst.num_levels() {
        for n in 0..inst.num_points() {
            let loc = inst.sampling_location(m, n);
            for (axis, v) in loc.into_iter().enumerate() {
                if (v - v.round()).abs() < MIN_BOUNDARY_DISTANCE {
                    return Err(DeformError::NearBoundary {
                        coordinate: format!("offsets[{m}][{n}].{}", ["x", "y"][axis]),
                        value: v,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Compares analytic gradients of `‖output‖²` with central differences of
/// step `h` over every coordinate of `wrt`. The relative error of one
/// coordinate is `|a − d| / max(|a|, |d|, RELATIVE_ERROR_FLOOR)`.
pub fn gradcheck(inst: &DeformableAttentionInstance, wrt: Wrt, h: f64) -> Result<GradcheckResult> {
    if !(h > 0.0 && h < MIN_BOUNDARY_DISTANCE) {
        return Err(DeformError::Step(h));
    }
    inst.validate()?;
    if wrt == Wrt::Offsets {
        check_offsets_interior(inst)?;
    }
    let analytic = gradients(inst)?.flatten(wrt);
    let mut work = inst.clone();
    let mut result = GradcheckResult {
        wrt,
        coordinates: param_count(inst, wrt),
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let (slot, label) = param_mut(&mut work, wrt, i);
        let x = *slot;
        *slot = x + h;
        let plus = forward_loss(&work);
        let (slot, _) = param_mut(&mut work, wrt, i);
        *slot = x - h;
        let minus = forward_loss(&work);
        let (slot, _) = param_mut(&mut work, wrt, i);
        *slot = x;
        let numeric = (plus - minus) / (2.0 * h);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        result.max_absolute_error = result.max_absolute_error.max(abs);
        if rel > result.max_relative_error || result.worst.is_none() {
            result.max_relative_error = result.max_relative_error.max(rel);
            result.worst = Some(label);
        }
    }
    Ok(result)
}

fn forward_loss(inst: &DeformableAttentionInstance) -> f64 {
    forward(inst).output.iter().map(|v| v * v).sum()
}

/// Sizes for [`random_instance`]. Levels are `(height, width)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub levels: Vec<(usize, usize)>,
    pub points: usize,
    pub channels: usize,
    pub projected_channels: usize,
    pub output_channels: Option<usize>,
}

impl InstanceShape {
    /// Two levels of 5×7 and 3×4 cells, four points, eight channels.
    pub fn reference() -> InstanceShape {
        InstanceShape { levels: vec![(5, 7), (3, 4)], points: 4, channels: 8, projected_channels: 8, output_channels: None }
    }

    /// Up to 3 levels of at most 8×8 cells, 8 points and 16 channels.
    pub fn random(seed: u64) -> InstanceShape {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=3);
        InstanceShape {
            levels: (0..m).map(|_| (rng.random_range(1..=8), rng.random_range(1..=8))).collect(),
            points: rng.random_range(1..=8),
            channels: rng.random_range(1..=16),
            projected_channels: rng.random_range(1..=16),
            output_channels: rng.random_bool(0.5).then(|| rng.random_range(1..=16)),
        }
    }
}

/// Seeded instance of the given shape. Sampling locations stay at least
/// 0.05 from every integer coordinate and range over `(-1, W) × (-1, H)`,
/// so some points straddle the grid border.
pub fn random_instance(seed: u64, shape: &InstanceShape) -> DeformableAttentionInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = shape.channels;
    let c_proj = shape.projected_channels;
    let unit = |rng: &mut ChaCha8Rng, scale: f64| rng.random_range(-scale..scale);
    let levels: Vec<FeatureLevel> = shape
        .levels
        .iter()
        .map(|&(h, w)| {
            let values = (0..h * w * c).map(|_| unit(&mut rng, 1.0)).collect();
            FeatureLevel::new(h, w, c, values).expect("shape dimensions are positive")
        })
        .collect();
    let (u, v) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let reference_points: Vec<[f64; 2]> = levels.iter().map(|l| l.from_normalized(u, v)).collect();
    let offsets = levels
        .iter()
        .zip(&reference_points)
        .map(|(l, r)| {
            (0..shape.points)
                .map(|_| {
                    let x = rng.random_range(-1..l.width as i64) as f64 + rng.random_range(0.05..0.95);
                    let y = rng.random_range(-1..l.height as i64) as f64 + rng.random_range(0.05..0.95);
                    [x - r[0], y - r[1]]
                })
                .collect()
        })
        .collect();
    let logits = shape.levels.iter().map(|_| (0..shape.points).map(|_| unit(&mut rng, 2.0)).collect()).collect();
    let scale = 1.0 / (c as f64).sqrt();
    let projections = shape
        .levels
        .iter()
        .map(|_| {
            (0..shape.points)
                .map(|_| {
                    let data = (0..c_proj * c).map(|_| unit(&mut rng, scale)).collect();
                    Matrix::new(c_proj, c, data).expect("shape dimensions are positive")
                })
                .collect()
        })
        .collect();
    let output_projection = shape.output_channels.map(|rows| {
        let data = (0..rows * c_proj).map(|_| unit(&mut rng, 1.0 / (c_proj as f64).sqrt())).collect();
        Matrix::new(rows, c_proj, data).expect("shape dimensions are positive")
    });
    let query = (0..c).map(|_| unit(&mut rng, 1.0)).collect();
    DeformableAttentionInstance { query, levels, reference_points, offsets, logits, projections, output_projection }
}

/// Outcome of the combined oracle and gradient suites.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub h: f64,
    pub max_oracle_deviation: f64,
    pub max_relative_error: Vec<(Wrt, f64)>,
    pub passed: bool,
}

pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Runs fused-versus-naive agreement on `trials` random shapes and
/// gradchecks for every [`Wrt`] on the reference shape at `seed` plus the
/// random shapes of the following `trials` seeds.
pub fn kernel_check(seed: u64, trials: usize, h: f64) -> Result<KernelCheckReport> {
    let mut max_oracle_deviation: f64 = 0.0;
    let mut worst = Wrt::ALL.map(|w| (w, 0.0_f64));
    let mut cases = vec![random_instance(seed, &InstanceShape::reference())];
    for t in 1..=trials as u64 {
        let s = seed.wrapping_add(t);
        cases.push(random_instance(s, &InstanceShape::random(s)));
    }
    for inst in &cases {
        let fused = deformable_attention(inst)?;
        let naive = naive_oracle(inst)?;
        for (a, b) in fused.iter().zip(&naive) {
            max_oracle_deviation = max_oracle_deviation.max((a - b).abs());
        }
        for (wrt, e) in worst.iter_mut() {
            *e = e.max(gradcheck(inst, *wrt, h)?.max_relative_error);
        }
    }
    let passed = max_oracle_deviation <= ORACLE_TOLERANCE && worst.iter().all(|(_, e)| *e < GRADIENT_TOLERANCE);
    Ok(KernelCheckReport { seed, trials, h, max_oracle_deviation, max_relative_error: worst.to_vec(), passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn single(level: FeatureLevel, reference: [f64; 2], offset: [f64; 2]) -> DeformableAttentionInstance {
        let c = level.channels();
        DeformableAttentionInstance {
            query: vec![0.0; c],
            levels: vec![level],
            reference_points: vec![reference],
            offsets: vec![vec![offset]],
            logits: vec![vec![0.0]],
            projections: vec![vec![Matrix::identity(c)]],
            output_projection: None,
        }
    }

    fn ramp(h: usize, w: usize, c: usize) -> FeatureLevel {
        FeatureLevel::from_fn(h, w, c, |y, x, ch| (y * 100 + x * 10 + ch) as f64).unwrap()
    }

    #[test]
    fn level_rejects_bad_shapes() {
        assert!(matches!(FeatureLevel::new(0, 2, 1, vec![]), Err(DeformError::Shape(_))));
        assert!(matches!(FeatureLevel::new(2, 2, 1, vec![0.0; 3]), Err(DeformError::Shape(_))));
        assert!(matches!(FeatureLevel::new(1, 1, 1, vec![f64::NAN]), Err(DeformError::NonFinite { .. })));
    }

    #[test]
    fn sample_on_grid_point_reads_cell() {
        let level = ramp(3, 4, 2);
        assert_eq!(bilinear_sample(&level, [2.0, 1.0]).unwrap(), vec![120.0, 121.0]);
        assert_eq!(bilinear_sample(&level, [3.0, 2.0]).unwrap(), vec![230.0, 231.0]);
    }

    #[test]
    fn sample_midpoint_and_outside() {
        let level = FeatureLevel::new(1, 2, 1, vec![3.0, 8.0]).unwrap();
        assert_eq!(bilinear_sample(&level, [0.5, 0.0]).unwrap(), vec![5.5]);
        assert_eq!(bilinear_sample(&level, [-1.0, -1.0]).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&ramp(3, 3, 2), [-1.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        // half a cell past the right edge keeps half of the border cell
        assert_eq!(bilinear_sample(&level, [1.5, 0.0]).unwrap(), vec![4.0]);
        assert!(matches!(bilinear_sample(&level, [f64::NAN, 0.0]), Err(DeformError::NonFinite { .. })));
        assert!(matches!(bilinear_sample(&level, [0.0, f64::INFINITY]), Err(DeformError::NonFinite { .. })));
    }

    #[test]
    fn sample_far_outside_is_zero() {
        let level = ramp(2, 2, 1);
        for loc in [[1e300, 0.0], [-1e300, 0.5], [0.5, 2.0], [2.0, 0.0]] {
            assert_eq!(bilinear_sample(&level, loc).unwrap(), vec![0.0], "{loc:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let w = normalize_weights(&[vec![0.3; 4], vec![0.3; 4]]);
        assert!(w.iter().flatten().all(|&v| (v - 0.125).abs() < 1e-15));
        let mut logits = vec![vec![0.0; 4]; 2];
        logits[1][2] = 1000.0;
        let w = normalize_weights(&logits);
        assert!((w[1][2] - 1.0).abs() < 1e-12);
        let base = vec![vec![0.1, -2.0, 3.5], vec![0.7, 0.0, -1.0]];
        let shifted: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|v| v + 250.0).collect()).collect();
        let (a, b) = (normalize_weights(&base), normalize_weights(&shifted));
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn single_lookup_collapses() {
        let level = ramp(3, 4, 3);
        let inst = single(level.clone(), [2.0, 1.0], [0.0, 0.0]);
        assert_eq!(deformable_attention(&inst).unwrap(), level.cell(1, 2));
        assert_eq!(naive_oracle(&inst).unwrap(), level.cell(1, 2));
    }

    #[test]
    fn single_point_is_projected_sample() {
        let level = ramp(3, 4, 2);
        let mut inst = single(level.clone(), [1.0, 1.0], [0.25, 0.5]);
        inst.projections[0][0] = Matrix::new(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let b = bilinear_sample(&level, [1.25, 1.5]).unwrap();
        let expected = [b[0] + 2.0 * b[1], -b[0] + 0.5 * b[1], 3.0 * b[1]];
        assert_eq!(naive_oracle(&inst).unwrap(), expected);
        let fused = deformable_attention(&inst).unwrap();
        for (a, e) in fused.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_give_zero_output() {
        let mut inst = random_instance(3, &InstanceShape::reference());
        for l in &mut inst.levels {
            l.values_mut().fill(0.0);
        }
        assert!(deformable_attention(&inst).unwrap().iter().all(|&v| v == 0.0));
        assert!(naive_oracle(&inst).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_instance_matches_oracle() {
        let inst = random_instance(42, &InstanceShape::reference());
        assert_eq!((inst.num_levels(), inst.num_points(), inst.channels()), (2, 4, 8));
        assert_eq!((inst.levels[0].height(), inst.levels[0].width()), (5, 7));
        let (a, b) = (deformable_attention(&inst).unwrap(), naive_oracle(&inst).unwrap());
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut inst = random_instance(1, &InstanceShape::reference());
        inst.projections[1][2] = Matrix::identity(3);
        assert!(matches!(deformable_attention(&inst), Err(DeformError::Shape(_))));
        let mut inst = random_instance(1, &InstanceShape::reference());
        inst.logits[0].pop();
        assert!(matches!(naive_oracle(&inst), Err(DeformError::Shape(_))));
        let mut inst = random_instance(1, &InstanceShape::reference());
        inst.output_projection = Some(Matrix::identity(5));
        assert!(matches!(deformable_attention(&inst), Err(DeformError::Shape(_))));
        let mut inst = random_instance(1, &InstanceShape::reference());
        inst.offsets[0][0][1] = f64::NAN;
        assert!(matches!(deformable_attention(&inst), Err(DeformError::NonFinite { .. })));
    }

    #[test]
    fn gradcheck_reference_instance() {
        let inst = random_instance(42, &InstanceShape::reference());
        for wrt in Wrt::ALL {
            let r = gradcheck(&inst, wrt, 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-4, "{wrt}: {r:?}");
            assert_eq!(r.coordinates, gradients(&inst).unwrap().flatten(wrt).len());
        }
    }

    #[test]
    fn gradcheck_covers_output_projection() {
        let mut shape = InstanceShape::reference();
        shape.output_channels = Some(5);
        let inst = random_instance(9, &shape);
        let r = gradcheck(&inst, Wrt::Projections, 1e-5).unwrap();
        assert_eq!(r.coordinates, 2 * 4 * 8 * 8 + 5 * 8);
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn flat_features_have_flat_offsets() {
        let level = FeatureLevel::from_fn(6, 6, 2, |_, _, c| 1.5 + c as f64).unwrap();
        let mut inst = single(level, [2.3, 2.6], [0.4, -0.2]);
        inst.offsets[0].push([-1.1, 0.35]);
        inst.logits[0].push(0.7);
        inst.projections[0].push(Matrix::new(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let g = gradients(&inst).unwrap();
        assert!(g.flatten(Wrt::Offsets).iter().all(|&v| v == 0.0));
        let r = gradcheck(&inst, Wrt::Offsets, 1e-5).unwrap();
        assert!(r.max_absolute_error < 1e-8, "{r:?}");
    }

    #[test]
    fn gradcheck_rejects_boundary_offsets() {
        let mut inst = random_instance(42, &InstanceShape::reference());
        inst.offsets[1][3][1] = inst.offsets[1][3][1] - inst.sampling_location(1, 3)[1].fract() + 2e-4;
        match gradcheck(&inst, Wrt::Offsets, 1e-5) {
            Err(DeformError::NearBoundary { coordinate, .. }) => assert_eq!(coordinate, "offsets[1][3].y"),
            other => panic!("{other:?}"),
        }
        // other inputs stay smooth in that configuration
        assert!(gradcheck(&inst, Wrt::Logits, 1e-5).is_ok());
        assert!(matches!(gradcheck(&inst, Wrt::Logits, 0.0), Err(DeformError::Step(_))));
    }

    #[test]
    fn fixture_round_trip() {
        let mut shape = InstanceShape::reference();
        shape.output_channels = Some(3);
        let inst = random_instance(5, &shape);
        let back = DeformableAttentionInstance::from_json_str(&inst.to_json_string()).unwrap();
        assert_eq!(back, inst);
        let bad = inst.to_json_string().replacen("\"height\": 5", "\"height\": 6", 1);
        assert!(matches!(DeformableAttentionInstance::from_json_str(&bad), Err(DeformError::Fixture(_))));
    }

    #[test]
    fn normalized_reference_aligns_levels() {
        let (a, b) = (ramp(5, 7, 1), ramp(3, 4, 1));
        assert_eq!(a.from_normalized(0.5, 0.5), [3.0, 2.0]);
        assert_eq!(b.from_normalized(0.5, 0.5), [1.5, 1.0]);
        assert_eq!(b.from_normalized(0.0, 1.0), [-0.5, 2.5]);
    }

    fn arb_instance() -> impl Strategy<Value = DeformableAttentionInstance> {
        any::<u64>().prop_map(|s| random_instance(s, &InstanceShape::random(s)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_sum_to_one(logits in proptest::collection::vec(proptest::collection::vec(-700.0f64..700.0, 1..8), 1..4)) {
            let n = logits[0].len();
            let logits: Vec<Vec<f64>> = logits.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
            let w = normalize_weights(&logits);
            prop_assert!(w.iter().flatten().all(|&v| v >= 0.0));
            prop_assert!((w.iter().flatten().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn fused_matches_naive(inst in arb_instance()) {
            let (a, b) = (deformable_attention(&inst).unwrap(), naive_oracle(&inst).unwrap());
            prop_assert_eq!(a.len(), inst.output_channels());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }

        #[test]
        fn linear_in_features(inst in arb_instance()) {
            let mut doubled = inst.clone();
            for l in &mut doubled.levels {
                l.values_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
            let (a, b) = (deformable_attention(&inst).unwrap(), deformable_attention(&doubled).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(2.0 * x, *y);
            }
        }

        #[test]
        fn in_grid_identity_output_is_convex(seed in any::<u64>(), lo in -5.0f64..0.0, span in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shape = InstanceShape::random(seed);
            shape.projected_channels = shape.channels;
            shape.output_channels = None;
            let mut inst = random_instance(seed, &shape);
            let hi = lo + span;
            for l in &mut inst.levels {
                l.values_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..=hi));
            }
            for m in 0..inst.num_levels() {
                let (w, h) = (inst.levels[m].width() as f64, inst.levels[m].height() as f64);
                let r = inst.reference_points[m];
                for n in 0..inst.num_points() {
                    let loc = [rng.random_range(0.0..=w - 1.0), rng.random_range(0.0..=h - 1.0)];
                    inst.offsets[m][n] = [loc[0] - r[0], loc[1] - r[1]];
                    inst.projections[m][n] = Matrix::identity(shape.channels);
                }
            }
            for v in deformable_attention(&inst).unwrap() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{} outside [{}, {}]", v, lo, hi);
            }
        }
    }
}
