//! Deformable registration producing a displacement field: a direct
//! per-pair optimizer (coarse-to-fine gradient descent with line search)
//! and an amortized convolutional predictor trained on image pairs with
//! the same unsupervised loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensorad::{Binding, ParamStore, SgdConfig, Tape, TensorRef};
use crate::volume::{trilinear_sample_raw, Volume3};
use crate::warp::{smoothness_energy_raw, DisplacementField};

/// Image similarity metric for the registration objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Mean squared difference.
    Mse,
    /// Negative global normalized cross-correlation.
    Ncc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegMode {
    Direct,
    Amortized,
}

/// Free parameters of the registration objective and optimizer.
#[derive(Debug, Clone, Copy)]
pub struct RegConfig {
    pub metric: Metric,
    pub lambda_smooth: f64,
    /// Pyramid depth for direct mode.
    pub levels: usize,
    /// Iterations per pyramid level in direct mode; total SGD iterations
    /// in amortized mode.
    pub iters_per_level: usize,
    /// Initial line-search step in direct mode; SGD learning rate in
    /// amortized mode.
    pub step: f64,
    pub mode: RegMode,
    pub seed: u64,
}

impl Default for RegConfig {
    fn default() -> RegConfig {
        RegConfig {
            metric: Metric::Mse,
            lambda_smooth: 0.01,
            levels: 3,
            iters_per_level: 100,
            step: 1.0,
            mode: RegMode::Direct,
            seed: 0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(CoreError::argument("levels must be >= 1"));
        }
        if self.iters_per_level < 1 {
            return Err(CoreError::argument("iters_per_level must be >= 1"));
        }
        if !(self.step > 0.0) {
            return Err(CoreError::argument("step must be > 0"));
        }
        if self.lambda_smooth < 0.0 {
            return Err(CoreError::argument("lambda_smooth must be >= 0"));
        }
        Ok(())
    }
}

/// Similarity between a fixed image and a warped moving image, with the
/// analytic gradient with respect to every warped sample.
pub fn similarity(fixed: &Volume3, warped: &Volume3, metric: Metric) -> Result<(f64, Vec<f64>)> {
    if fixed.dims() != warped.dims() || fixed.channels() != warped.channels() {
        return Err(CoreError::argument(format!(
            "similarity: grids differ ({:?} x{} vs {:?} x{})",
            fixed.dims(),
            fixed.channels(),
            warped.dims(),
            warped.channels()
        )));
    }
    let f: Vec<f64> = fixed.voxels().iter().map(|&v| v as f64).collect();
    let w: Vec<f64> = warped.voxels().iter().map(|&v| v as f64).collect();
    similarity_raw(&f, &w, metric)
}

pub(crate) fn similarity_raw(f: &[f64], w: &[f64], metric: Metric) -> Result<(f64, Vec<f64>)> {
    let n = f.len() as f64;
    match metric {
        Metric::Mse => {
            let mut loss = 0.0;
            let mut grad = vec![0.0f64; w.len()];
            for i in 0..w.len() {
                let r = w[i] - f[i];
                loss += r * r;
                grad[i] = 2.0 * r / n;
            }
            Ok((loss / n, grad))
        }
        Metric::Ncc => {
            let mean_w = w.iter().sum::<f64>() / n;
            let mean_f = f.iter().sum::<f64>() / n;
            let mut s_ab = 0.0;
            let mut s_aa = 0.0;
            let mut s_bb = 0.0;
            for i in 0..w.len() {
                let a = w[i] - mean_w;
                let b = f[i] - mean_f;
                s_ab += a * b;
                s_aa += a * a;
                s_bb += b * b;
            }
            if s_aa < 1e-12 || s_bb < 1e-12 {
                return Err(CoreError::Degenerate(
                    "ncc undefined on a constant image".into(),
                ));
            }
            let denom = (s_aa * s_bb).sqrt();
            let ncc = s_ab / denom;
            let mut grad = vec![0.0f64; w.len()];
            for i in 0..w.len() {
                let a = w[i] - mean_w;
                let b = f[i] - mean_f;
                // d(-ncc)/dw_i; mean terms vanish because sum(b) = 0
                grad[i] = -(b / denom - s_ab * a / (s_aa * denom));
            }
            Ok((-ncc, grad))
        }
    }
}

// ---------------------------------------------------------------------------
// Direct per-pair optimization
// ---------------------------------------------------------------------------

/// Single-channel image in f64 used inside the optimizer.
struct Pyramid {
    /// Finest first; each level halves the extents (floor, min 1).
    levels: Vec<(Vec<f32>, (usize, usize, usize))>,
}

fn downsample_avg(data: &[f32], dims: (usize, usize, usize)) -> (Vec<f32>, (usize, usize, usize)) {
    let (nx, ny, nz) = dims;
    let (ox, oy, oz) = ((nx / 2).max(1), (ny / 2).max(1), (nz / 2).max(1));
    let mut out = vec![0.0f32; ox * oy * oz];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut acc = 0.0f64;
                let mut cnt = 0.0f64;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (sx, sy, sz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                            if sx < nx && sy < ny && sz < nz {
                                acc += data[(sz * ny + sy) * nx + sx] as f64;
                                cnt += 1.0;
                            }
                        }
                    }
                }
                out[(z * oy + y) * ox + x] = (acc / cnt) as f32;
            }
        }
    }
    (out, (ox, oy, oz))
}

fn build_pyramid(vol: &Volume3, levels: usize) -> Pyramid {
    let mut out = vec![(vol.channel(0).to_vec(), vol.dims())];
    for _ in 1..levels {
        let (data, dims) = out.last().unwrap();
        if dims.0 <= 4 && dims.1 <= 4 && dims.2 <= 4 {
            break;
        }
        let next = downsample_avg(data, *dims);
        out.push(next);
    }
    Pyramid { levels: out }
}

/// Trilinearly upsamples a field between grids, scaling each component by
/// the per-axis resolution ratio.
fn upsample_field(
    field: &[f64],
    from: (usize, usize, usize),
    to: (usize, usize, usize),
) -> Vec<f64> {
    let nf = to.0 * to.1 * to.2;
    let nc = from.0 * from.1 * from.2;
    let scale = [
        to.0 as f64 / from.0 as f64,
        to.1 as f64 / from.1 as f64,
        to.2 as f64 / from.2 as f64,
    ];
    let mut out = vec![0.0f64; 3 * nf];
    for comp in 0..3 {
        let plane: Vec<f32> = field[comp * nc..(comp + 1) * nc]
            .iter()
            .map(|&v| v as f32)
            .collect();
        for z in 0..to.2 {
            for y in 0..to.1 {
                for x in 0..to.0 {
                    let p = (
                        ((x as f64 + 0.5) / scale[0] - 0.5) as f32,
                        ((y as f64 + 0.5) / scale[1] - 0.5) as f32,
                        ((z as f64 + 0.5) / scale[2] - 0.5) as f32,
                    );
                    out[comp * nf + (z * to.1 + y) * to.0 + x] =
                        trilinear_sample_raw(&plane, from, p) as f64 * scale[comp];
                }
            }
        }
    }
    out
}

/// Separable [1, 1, 1]/3 blur of each field component, zero-padded. The
/// kernel matrix is symmetric, so two applications form a positive
/// semi-definite operator: smoothing the gradient twice always yields a
/// descent direction.
fn blur_field(field: &[f64], dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let mut out = field.to_vec();
    let mut tmp = vec![0.0f64; n];
    let strides = [(1usize, nx), (nx, ny), (nx * ny, nz)];
    for comp in 0..3 {
        let plane = &mut out[comp * n..(comp + 1) * n];
        for &(stride, extent) in &strides {
            if extent == 1 {
                continue;
            }
            for i in 0..n {
                let pos = (i / stride) % extent;
                let mut acc = plane[i];
                if pos > 0 {
                    acc += plane[i - stride];
                }
                if pos + 1 < extent {
                    acc += plane[i + stride];
                }
                tmp[i] = acc / 3.0;
            }
            plane.copy_from_slice(&tmp);
        }
    }
    out
}

/// Loss and gradient of `similarity(f, warp(m, phi)) + lambda * smooth(phi)`
/// with respect to every field component, all in f64.
fn field_loss_grad(
    fixed: &[f32],
    moving: &[f32],
    dims: (usize, usize, usize),
    phi: &[f64],
    metric: Metric,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let mut warped = vec![0.0f64; n];
    let mut jac = vec![[0.0f64; 3]; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let p = (
                    x as f64 + phi[i],
                    y as f64 + phi[n + i],
                    z as f64 + phi[2 * n + i],
                );
                let (v, d) = crate::tensorad::trilinear_with_grad_f32(moving, dims, p);
                warped[i] = v;
                jac[i] = d;
            }
        }
    }
    let fixed64: Vec<f64> = fixed.iter().map(|&v| v as f64).collect();
    let (sim, sim_grad) = similarity_raw(&fixed64, &warped, metric)?;
    let (smooth, smooth_grad) = smoothness_energy_raw(phi, dims);
    let mut grad = vec![0.0f64; 3 * n];
    for i in 0..n {
        for k in 0..3 {
            grad[k * n + i] = sim_grad[i] * jac[i][k] + lambda * smooth_grad[k * n + i];
        }
    }
    Ok((sim + lambda * smooth, grad))
}

/// Classical per-pair deformable registration: coarse-to-fine gradient
/// descent with step-halving line search. Both inputs must be
/// single-channel on the same grid; the returned field never has a higher
/// total loss than the identity field.
pub fn register_direct(
    fixed: &Volume3,
    moving: &Volume3,
    cfg: &RegConfig,
) -> Result<DisplacementField> {
    cfg.validate()?;
    if fixed.channels() != 1 || moving.channels() != 1 {
        return Err(CoreError::argument(
            "register_direct expects single-channel images (use the anatomical channel)",
        ));
    }
    if fixed.dims() != moving.dims() {
        return Err(CoreError::argument(format!(
            "register_direct: grids differ {:?} vs {:?}",
            fixed.dims(),
            moving.dims()
        )));
    }
    let fpyr = build_pyramid(fixed, cfg.levels);
    let mpyr = build_pyramid(moving, cfg.levels);
    let depth = fpyr.levels.len();

    let mut phi: Option<(Vec<f64>, (usize, usize, usize))> = None;
    for level in (0..depth).rev() {
        let (fdata, dims) = &fpyr.levels[level];
        let (mdata, _) = &mpyr.levels[level];
        let n = dims.0 * dims.1 * dims.2;
        let mut field = match phi {
            Some((coarse, cdims)) => upsample_field(&coarse, cdims, *dims),
            None => vec![0.0f64; 3 * n],
        };
        if level == 0 {
            // the coarse initialization is usually better than identity, but
            // the contract guarantees "no worse than identity", so keep the
            // better of the two as the starting point
            let zero = vec![0.0f64; 3 * n];
            let (init_loss, _) =
                field_loss_grad(fdata, mdata, *dims, &field, cfg.metric, cfg.lambda_smooth)?;
            let (id_loss, _) =
                field_loss_grad(fdata, mdata, *dims, &zero, cfg.metric, cfg.lambda_smooth)?;
            if id_loss < init_loss {
                field = zero;
            }
        }
        let mut step = cfg.step;
        let (mut loss, mut grad) =
            field_loss_grad(fdata, mdata, *dims, &field, cfg.metric, cfg.lambda_smooth)?;
        'level: for _ in 0..cfg.iters_per_level {
            // the smoothed gradient spreads edge-driven updates into flat
            // image regions; the raw gradient is kept as a fallback so the
            // line search can still make progress near a smoothed-direction
            // stationary point
            let smoothed = blur_field(&blur_field(&grad, *dims), *dims);
            let mut accepted = false;
            for use_smoothed in [true, false] {
                let dir: Vec<f64> = if use_smoothed {
                    smoothed.clone()
                } else {
                    grad.clone()
                };
                let eval = |t: f64| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                    let trial: Vec<f64> = field
                        .iter()
                        .zip(dir.iter())
                        .map(|(&v, &g)| v - t * g)
                        .collect();
                    let (l, g) = field_loss_grad(
                        fdata,
                        mdata,
                        *dims,
                        &trial,
                        cfg.metric,
                        cfg.lambda_smooth,
                    )?;
                    Ok((l, g, trial))
                };
                // halve until improving, then keep doubling while it helps
                let mut t = step;
                let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
                for _ in 0..24 {
                    let cand = eval(t)?;
                    if cand.0 < loss {
                        best = Some(cand);
                        break;
                    }
                    t *= 0.5;
                }
                if let Some(mut b) = best {
                    for _ in 0..40 {
                        let cand = eval(t * 2.0)?;
                        if cand.0 < b.0 {
                            t *= 2.0;
                            b = cand;
                        } else {
                            break;
                        }
                    }
                    loss = b.0;
                    grad = b.1;
                    field = b.2;
                    step = t;
                    accepted = true;
                }
                if accepted {
                    continue 'level;
                }
            }
            break; // local minimum at line-search resolution
        }
        phi = Some((field, *dims));
    }
    let (field, dims) = phi.expect("at least one pyramid level");
    debug_assert_eq!(dims, fixed.dims());
    DisplacementField::new(dims, field.iter().map(|&v| v as f32).collect())
}

// ---------------------------------------------------------------------------
// Amortized predictor
// ---------------------------------------------------------------------------

const AMORT_BASE: usize = 8;

/// Learned registration model: a small encoder-decoder mapping the
/// 2-channel (fixed, moving) stack to a 3-channel displacement field.
/// The final projection is zero-initialized so an untrained model predicts
/// the identity transform.
#[derive(Debug, Clone)]
pub struct RegModel {
    store: ParamStore<f32>,
    dims: (usize, usize, usize),
}

// (name, cout, cin, k) triples of the predictor, base width 8
fn amort_layers() -> Vec<(&'static str, usize, usize, usize)> {
    let b = AMORT_BASE;
    vec![
        ("enc0.c1", b, 2, 3),
        ("enc0.c2", b, b, 3),
        ("enc1.c1", 2 * b, b, 3),
        ("enc1.c2", 2 * b, 2 * b, 3),
        ("bot.c1", 4 * b, 2 * b, 3),
        ("bot.c2", 4 * b, 4 * b, 3),
        ("dec1.c1", 2 * b, 4 * b + 2 * b, 3),
        ("dec1.c2", 2 * b, 2 * b, 3),
        ("dec0.c1", b, 2 * b + b, 3),
        ("dec0.c2", b, b, 3),
        ("head", 3, b, 1),
    ]
}

fn init_conv(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    zero: bool,
) -> Result<()> {
    let n = cout * cin * k * k * k;
    let bound = (1.0 / (cin * k * k * k) as f64).sqrt() as f32;
    let w: Vec<f32> = (0..n)
        .map(|_| if zero { 0.0 } else { rng.gen_range(-bound..bound) })
        .collect();
    store.register(&format!("{}.w", name), &[cout, cin, k, k, k], w)?;
    store.register(&format!("{}.b", name), &[cout], vec![0.0; cout])?;
    Ok(())
}

impl RegModel {
    pub fn init(dims: (usize, usize, usize), seed: u64) -> Result<RegModel> {
        if dims.0 % 4 != 0 || dims.1 % 4 != 0 || dims.2 % 4 != 0 {
            return Err(CoreError::argument(
                "amortized model needs extents divisible by 4",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, cout, cin, k) in amort_layers() {
            init_conv(&mut store, &mut rng, name, cout, cin, k, name == "head")?;
        }
        Ok(RegModel { store, dims })
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn conv_block(
        &self,
        tape: &mut Tape<f32>,
        binding: &mut Binding,
        name: &str,
        x: TensorRef,
        relu: bool,
    ) -> Result<TensorRef> {
        let w = self.store.bind(tape, binding, &format!("{}.w", name))?;
        let b = self.store.bind(tape, binding, &format!("{}.b", name))?;
        let k = self.store.shape(&format!("{}.w", name))?[2];
        let y = tape.conv3(x, w, Some(b), 1, k / 2)?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Records the forward pass on `tape`; returns the (3, D, H, W) field
    /// tensor.
    fn forward(
        &self,
        tape: &mut Tape<f32>,
        binding: &mut Binding,
        input: TensorRef,
    ) -> Result<TensorRef> {
        let e0 = self.conv_block(tape, binding, "enc0.c1", input, true)?;
        let e0 = self.conv_block(tape, binding, "enc0.c2", e0, true)?;
        let p0 = tape.downsample2(e0)?;
        let e1 = self.conv_block(tape, binding, "enc1.c1", p0, true)?;
        let e1 = self.conv_block(tape, binding, "enc1.c2", e1, true)?;
        let p1 = tape.downsample2(e1)?;
        let b = self.conv_block(tape, binding, "bot.c1", p1, true)?;
        let b = self.conv_block(tape, binding, "bot.c2", b, true)?;
        let u1 = tape.upsample2(b)?;
        let d1 = tape.concat(&[u1, e1], 0)?;
        let d1 = self.conv_block(tape, binding, "dec1.c1", d1, true)?;
        let d1 = self.conv_block(tape, binding, "dec1.c2", d1, true)?;
        let u0 = tape.upsample2(d1)?;
        let d0 = tape.concat(&[u0, e0], 0)?;
        let d0 = self.conv_block(tape, binding, "dec0.c1", d0, true)?;
        let d0 = self.conv_block(tape, binding, "dec0.c2", d0, true)?;
        self.conv_block(tape, binding, "head", d0, false)
    }
}

fn pair_input_tensor(
    tape: &mut Tape<f32>,
    fixed: &Volume3,
    moving: &Volume3,
) -> Result<TensorRef> {
    let (nx, ny, nz) = fixed.dims();
    let mut data = Vec::with_capacity(2 * fixed.num_voxels());
    data.extend_from_slice(fixed.channel(0));
    data.extend_from_slice(moving.channel(0));
    tape.constant(&[2, nz, ny, nx], data)
}

fn check_pair(fixed: &Volume3, moving: &Volume3, dims: (usize, usize, usize)) -> Result<()> {
    if fixed.dims() != dims || moving.dims() != dims {
        return Err(CoreError::argument(format!(
            "pair grid {:?}/{:?} does not match model grid {:?}",
            fixed.dims(),
            moving.dims(),
            dims
        )));
    }
    if fixed.channels() != 1 || moving.channels() != 1 {
        return Err(CoreError::argument("amortized pairs must be single-channel"));
    }
    Ok(())
}

/// Trains the amortized predictor with SGD on the unsupervised loss
/// `mse(f, warp(m, g(f, m))) + lambda * smooth(g(f, m))` averaged over
/// pairs. Returns the model and the per-iteration loss history.
/// Deterministic given the seed.
pub fn train_amortized(
    pairs: &[(Volume3, Volume3)],
    cfg: &RegConfig,
) -> Result<(RegModel, Vec<f64>)> {
    cfg.validate()?;
    if cfg.mode != RegMode::Amortized {
        return Err(CoreError::argument("train_amortized needs mode = amortized"));
    }
    let first = pairs
        .first()
        .ok_or_else(|| CoreError::argument("train_amortized: empty pair list"))?;
    let dims = first.0.dims();
    for (f, m) in pairs {
        check_pair(f, m, dims)?;
    }
    let mut model = RegModel::init(dims, cfg.seed)?;
    let sgd = SgdConfig {
        lr0: cfg.step,
        momentum: 0.9,
        weight_decay: 0.0,
        power: 0.9,
        total_steps: cfg.iters_per_level.max(1) + 1,
    };
    let mut history = Vec::with_capacity(cfg.iters_per_level);
    for it in 0..cfg.iters_per_level {
        let mut iter_loss = 0.0f64;
        for (fixed, moving) in pairs {
            let mut tape: Tape<f32> = Tape::new();
            let mut binding = Binding::new();
            let input = pair_input_tensor(&mut tape, fixed, moving)?;
            let phi = model.forward(&mut tape, &mut binding, input)?;
            let sim = tape.warp_mse(
                phi,
                moving.channel(0).to_vec(),
                fixed.channel(0).to_vec(),
                1,
            )?;
            let smooth = tape.smoothness(phi)?;
            let weighted = tape.scale(smooth, cfg.lambda_smooth as f32)?;
            let loss = tape.add(sim, weighted)?;
            iter_loss += tape.data(loss)[0] as f64;
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape, &binding);
            model.store.sgd_step(&sgd, it)?;
        }
        history.push(iter_loss / pairs.len() as f64);
    }
    Ok((model, history))
}

/// One forward pass of the trained predictor.
pub fn predict_field(
    model: &RegModel,
    fixed: &Volume3,
    moving: &Volume3,
) -> Result<DisplacementField> {
    check_pair(fixed, moving, model.dims)?;
    let mut tape: Tape<f32> = Tape::new();
    let mut binding = Binding::new();
    let input = pair_input_tensor(&mut tape, fixed, moving)?;
    let phi = model.forward(&mut tape, &mut binding, input)?;
    DisplacementField::new(model.dims, tape.data(phi).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{constant_field, warp_volume};
    use rand::Rng;

    fn smooth_blob(dims: (usize, usize, usize)) -> Volume3 {
        let (nx, ny, nz) = dims;
        let mut v = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let dx = (x as f32 - nx as f32 / 2.0) / (nx as f32 / 3.0);
                    let dy = (y as f32 - ny as f32 / 2.0) / (ny as f32 / 3.0);
                    let dz = (z as f32 - nz as f32 / 2.0) / (nz as f32 / 3.0);
                    v.push((-(dx * dx + dy * dy + dz * dz)).exp());
                }
            }
        }
        Volume3::new(dims, (1.0, 1.0, 1.0), 1, v).unwrap()
    }

    #[test]
    fn mse_similarity_zero_for_equal_images() {
        let vol = smooth_blob((6, 6, 6));
        let (loss, grad) = similarity(&vol, &vol, Metric::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ncc_of_image_with_itself_is_minus_one() {
        let vol = smooth_blob((6, 6, 6));
        let (loss, _) = similarity(&vol, &vol, Metric::Ncc).unwrap();
        assert!((loss + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_rejects_constant_image() {
        let a = Volume3::new((2, 2, 2), (1.0, 1.0, 1.0), 1, vec![1.0; 8]).unwrap();
        let b = smooth_blob((2, 2, 2));
        assert!(matches!(
            similarity(&b, &a, Metric::Ncc),
            Err(CoreError::Degenerate(_))
        ));
    }

    #[test]
    fn similarity_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let f: Vec<f64> = (0..27).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w: Vec<f64> = (0..27).map(|_| rng.gen_range(0.0..1.0)).collect();
        for metric in [Metric::Mse, Metric::Ncc] {
            let (_, grad) = similarity_raw(&f, &w, metric).unwrap();
            let h = 1e-6;
            for i in 0..w.len() {
                let mut wp = w.clone();
                wp[i] += h;
                let mut wm = w.clone();
                wm[i] -= h;
                let (lp, _) = similarity_raw(&f, &wp, metric).unwrap();
                let (lm, _) = similarity_raw(&f, &wm, metric).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let denom = (fd.abs() + grad[i].abs()).max(1e-6);
                assert!(
                    (fd - grad[i]).abs() / denom < 1e-5,
                    "{:?} element {}: {} vs {}",
                    metric,
                    i,
                    grad[i],
                    fd
                );
            }
        }
    }

    fn quick_cfg() -> RegConfig {
        RegConfig {
            levels: 2,
            iters_per_level: 25,
            ..RegConfig::default()
        }
    }

    #[test]
    fn registering_identical_images_stays_near_identity() {
        let vol = smooth_blob((16, 16, 16));
        let phi = register_direct(&vol, &vol, &quick_cfg()).unwrap();
        assert!(phi.mean_magnitude() < 0.1, "mean {}", phi.mean_magnitude());
    }

    #[test]
    fn recovers_a_constant_translation() {
        let dims = (16, 16, 16);
        let fixed = smooth_blob(dims);
        // moving(x) = fixed(x + 2), so u = (-2, 0, 0) warps moving back onto
        // fixed
        let shift = constant_field(dims, (2.0, 0.0, 0.0));
        let moving = warp_volume(&fixed, &shift);
        let cfg = RegConfig {
            levels: 3,
            iters_per_level: 200,
            // the smoothness term is an unnormalized sum, so lambda must be
            // small relative to the voxel count for the similarity to lead
            lambda_smooth: 5e-4,
            ..RegConfig::default()
        };
        let phi = register_direct(&fixed, &moving, &cfg).unwrap();
        // foreground = voxels with appreciable intensity
        let (nx, ny, nz) = dims;
        let n = nx * ny * nz;
        let mut mean = [0.0f64; 3];
        let mut count = 0usize;
        for i in 0..n {
            if moving.voxels()[i] > 0.2 {
                for k in 0..3 {
                    mean[k] += phi.vectors()[k * n + i] as f64;
                }
                count += 1;
            }
        }
        for k in 0..3 {
            mean[k] /= count as f64;
        }
        let err = ((mean[0] + 2.0).powi(2) + mean[1].powi(2) + mean[2].powi(2)).sqrt();
        assert!(err < 0.5, "mean displacement {:?}, error {}", mean, err);
    }

    #[test]
    fn huge_smoothness_weight_forces_a_nearly_constant_field() {
        let dims = (12, 12, 12);
        let fixed = smooth_blob(dims);
        let shift = constant_field(dims, (1.5, 0.0, 0.0));
        let moving = warp_volume(&fixed, &shift);
        let cfg = RegConfig {
            lambda_smooth: 1e6,
            levels: 2,
            iters_per_level: 40,
            ..RegConfig::default()
        };
        let phi = register_direct(&fixed, &moving, &cfg).unwrap();
        let n = phi.num_voxels();
        for comp in 0..3 {
            let plane = phi.component(comp);
            let mean: f32 = plane.iter().sum::<f32>() / n as f32;
            let max_dev = plane
                .iter()
                .map(|v| (v - mean).abs())
                .fold(0.0f32, f32::max);
            assert!(max_dev < 0.05, "component {} deviates {}", comp, max_dev);
        }
    }

    #[test]
    fn direct_loss_never_exceeds_identity_loss() {
        let dims = (12, 12, 12);
        let fixed = smooth_blob(dims);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = dims.0 * dims.1 * dims.2;
        let vecs: Vec<f32> = (0..3 * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let smooth_phi = {
            // random low-res field upsampled = smooth deformation
            let coarse: Vec<f64> = vecs[..3 * 27].iter().map(|&v| v as f64).collect();
            let up = upsample_field(&coarse, (3, 3, 3), dims);
            DisplacementField::new(dims, up.iter().map(|&v| v as f32).collect()).unwrap()
        };
        let moving = warp_volume(&fixed, &smooth_phi);
        let cfg = quick_cfg();
        let phi = register_direct(&fixed, &moving, &cfg).unwrap();
        let final_loss = {
            let f64field: Vec<f64> = phi.vectors().iter().map(|&v| v as f64).collect();
            field_loss_grad(
                fixed.channel(0),
                moving.channel(0),
                dims,
                &f64field,
                cfg.metric,
                cfg.lambda_smooth,
            )
            .unwrap()
            .0
        };
        let id_loss = field_loss_grad(
            fixed.channel(0),
            moving.channel(0),
            dims,
            &vec![0.0; 3 * n],
            cfg.metric,
            cfg.lambda_smooth,
        )
        .unwrap()
        .0;
        assert!(final_loss <= id_loss);
    }

    #[test]
    fn direct_mode_is_deterministic() {
        let dims = (12, 12, 12);
        let fixed = smooth_blob(dims);
        let moving = warp_volume(&fixed, &constant_field(dims, (1.0, 0.5, 0.0)));
        let a = register_direct(&fixed, &moving, &quick_cfg()).unwrap();
        let b = register_direct(&fixed, &moving, &quick_cfg()).unwrap();
        assert_eq!(a.vectors(), b.vectors());
    }

    fn amort_cfg(iters: usize) -> RegConfig {
        RegConfig {
            mode: RegMode::Amortized,
            iters_per_level: iters,
            step: 0.1,
            lambda_smooth: 0.001,
            seed: 9,
            ..RegConfig::default()
        }
    }

    #[test]
    fn zero_initialized_head_predicts_zero_field() {
        let dims = (8, 8, 8);
        let model = RegModel::init(dims, 1).unwrap();
        let f = smooth_blob(dims);
        let m = smooth_blob(dims);
        let phi = predict_field(&model, &f, &m).unwrap();
        assert!(phi.vectors().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amortized_overfits_one_pair() {
        let dims = (8, 8, 8);
        let fixed = smooth_blob(dims);
        let moving = warp_volume(&fixed, &constant_field(dims, (1.0, 0.0, 0.0)));
        let (model, history) =
            train_amortized(&[(fixed.clone(), moving.clone())], &amort_cfg(100)).unwrap();
        assert!(
            history.last().unwrap() < &(history[0] * 0.5),
            "loss {} -> {}",
            history[0],
            history.last().unwrap()
        );
        // warped similarity no worse than identity
        let phi = predict_field(&model, &fixed, &moving).unwrap();
        let warped = warp_volume(&moving, &phi);
        let (after, _) = similarity(&fixed, &warped, Metric::Mse).unwrap();
        let (before, _) = similarity(&fixed, &moving, Metric::Mse).unwrap();
        assert!(after <= before, "mse {} vs identity {}", after, before);
    }

    #[test]
    fn amortized_training_is_seed_deterministic() {
        let dims = (8, 8, 8);
        let fixed = smooth_blob(dims);
        let moving = warp_volume(&fixed, &constant_field(dims, (0.5, 0.5, 0.0)));
        let pairs = vec![(fixed, moving)];
        let (a, _) = train_amortized(&pairs, &amort_cfg(5)).unwrap();
        let (b, _) = train_amortized(&pairs, &amort_cfg(5)).unwrap();
        for name in a.store().names() {
            assert_eq!(a.store().data(name).unwrap(), b.store().data(name).unwrap());
        }
    }

    #[test]
    fn zero_iterations_not_allowed_but_init_is_seeded() {
        let a = RegModel::init((8, 8, 8), 42).unwrap();
        let b = RegModel::init((8, 8, 8), 42).unwrap();
        for name in a.store().names() {
            assert_eq!(a.store().data(name).unwrap(), b.store().data(name).unwrap());
        }
    }
}
