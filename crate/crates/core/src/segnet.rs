//! Two-stage segmentation: an encoder-decoder FCN with optional position
//! attention at the bottleneck, cascaded as coarse foreground detection
//! followed by fine 17-ROI segmentation on the cropped region.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::PositionAttention;
use crate::error::{CoreError, Result};
use crate::fuse::{build_network_input, AtlasPrior};
use crate::tensorad::{Binding, ParamStore, Real, SgdConfig, Tape, TensorRef};
use crate::volume::{flip_labels, flip_volume, FlipAxes, LabelMap, RoiId, Volume3, NUM_CLASSES};

/// Architecture knobs of one encoder-decoder network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncDecConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub use_attention: bool,
    pub crop_margin: usize,
}

impl EncDecConfig {
    pub fn new(in_channels: usize, out_classes: usize, use_attention: bool) -> EncDecConfig {
        EncDecConfig {
            levels: 3,
            base_channels: 16,
            in_channels,
            out_classes,
            use_attention,
            crop_margin: 8,
        }
    }

    /// Spatial extents must be divisible by this.
    pub fn grid_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(CoreError::argument("encdec config fields must be positive"));
        }
        if self.out_classes < 2 {
            return Err(CoreError::argument("out_classes must be at least 2"));
        }
        Ok(())
    }
}

/// One encoder-decoder network whose parameters live in a [`ParamStore`]
/// under `prefix`.
#[derive(Debug, Clone)]
pub struct EncDec {
    cfg: EncDecConfig,
    prefix: String,
}

impl EncDec {
    pub fn new(prefix: impl Into<String>, cfg: EncDecConfig) -> EncDec {
        EncDec {
            cfg,
            prefix: prefix.into(),
        }
    }

    pub fn cfg(&self) -> &EncDecConfig {
        &self.cfg
    }

    fn attention(&self) -> PositionAttention {
        let bottleneck = self.cfg.base_channels << self.cfg.levels;
        PositionAttention::new(format!("{}attn.", self.prefix), bottleneck)
    }

    /// Conv layers as (name, out, in, kernel) in forward order.
    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let cfg = &self.cfg;
        let ch = |l: usize| cfg.base_channels << l;
        let mut out = Vec::new();
        let mut cin = cfg.in_channels;
        for l in 0..cfg.levels {
            out.push((format!("{}enc{}.c1", self.prefix, l), ch(l), cin, 3));
            out.push((format!("{}enc{}.c2", self.prefix, l), ch(l), ch(l), 3));
            cin = ch(l);
        }
        let bot = ch(cfg.levels);
        out.push((format!("{}bot.c1", self.prefix), bot, cin, 3));
        out.push((format!("{}bot.c2", self.prefix), bot, bot, 3));
        let mut prev = bot;
        for l in (0..cfg.levels).rev() {
            out.push((format!("{}dec{}.c1", self.prefix, l), ch(l), prev + ch(l), 3));
            out.push((format!("{}dec{}.c2", self.prefix, l), ch(l), ch(l), 3));
            prev = ch(l);
        }
        out.push((format!("{}head", self.prefix), cfg.out_classes, prev, 1));
        out
    }

    /// Parameter (name, shape) pairs in registration order, attention last.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, cout, cin, k) in self.layers() {
            out.push((format!("{}.w", name), vec![cout, cin, k, k, k]));
            out.push((format!("{}.b", name), vec![cout]));
        }
        if self.cfg.use_attention {
            let attn = self.attention();
            let cp = attn.cprime();
            let cin = attn.cin();
            for (name, shape) in attn
                .param_names()
                .into_iter()
                .zip([vec![cp, cin, 1, 1, 1], vec![cp, cin, 1, 1, 1], vec![cin, cin, 1, 1, 1]])
            {
                out.push((name, shape));
            }
        }
        out
    }

    /// Registers and initializes all parameters. Conv weights get uniform
    /// fan-in init, biases zero; attention follows its own convention.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.cfg.validate()?;
        for (name, cout, cin, k) in self.layers() {
            // Kaiming-uniform bound for relu nets
            let bound = (6.0 / (cin * k * k * k) as f64).sqrt();
            let w: Vec<T> = (0..cout * cin * k * k * k)
                .map(|_| T::cast_from(rng.gen_range(-bound..bound)))
                .collect();
            store.register(&format!("{}.w", name), &[cout, cin, k, k, k], w)?;
            store.register(&format!("{}.b", name), &[cout], vec![T::zero(); cout])?;
        }
        if self.cfg.use_attention {
            self.attention().init(store, rng)?;
        }
        Ok(())
    }

    fn check_extents(&self, shape: &[usize]) -> Result<()> {
        let m = self.cfg.grid_multiple();
        if shape.len() != 4 {
            return Err(CoreError::argument("encdec expects rank-4 (C, D, H, W) input"));
        }
        if shape[0] != self.cfg.in_channels {
            return Err(CoreError::argument(format!(
                "input has {} channels, network expects {}",
                shape[0], self.cfg.in_channels
            )));
        }
        if shape[1..].iter().any(|&e| e % m != 0) {
            return Err(CoreError::argument(format!(
                "spatial extents {:?} must each be a multiple of {}",
                &shape[1..],
                m
            )));
        }
        Ok(())
    }

    /// Forward pass with explicit parameter tensors, keyed by name.
    pub fn forward_with_params<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &HashMap<String, TensorRef>,
        input: TensorRef,
    ) -> Result<TensorRef> {
        self.check_extents(tape.shape(input))?;
        let get = |key: String| -> Result<TensorRef> {
            params
                .get(&key)
                .copied()
                .ok_or_else(|| CoreError::argument(format!("missing parameter {}", key)))
        };
        let block = |tape: &mut Tape<T>, name: String, x: TensorRef, relu: bool| -> Result<TensorRef> {
            let w = get(format!("{}.w", name))?;
            let b = get(format!("{}.b", name))?;
            let k = tape.shape(w)[2];
            let y = tape.conv3(x, w, Some(b), 1, k / 2)?;
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };
        let mut x = input;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for l in 0..self.cfg.levels {
            x = block(tape, format!("{}enc{}.c1", self.prefix, l), x, true)?;
            x = block(tape, format!("{}enc{}.c2", self.prefix, l), x, true)?;
            skips.push(x);
            x = tape.downsample2(x)?;
        }
        x = block(tape, format!("{}bot.c1", self.prefix), x, true)?;
        x = block(tape, format!("{}bot.c2", self.prefix), x, true)?;
        if self.cfg.use_attention {
            let attn = self.attention();
            let names = attn.param_names();
            x = attn.forward_with(tape, x, get(names[0].clone())?, get(names[1].clone())?, get(names[2].clone())?)?;
        }
        for l in (0..self.cfg.levels).rev() {
            x = tape.upsample2(x)?;
            x = tape.concat(&[x, skips[l]], 0)?;
            x = block(tape, format!("{}dec{}.c1", self.prefix, l), x, true)?;
            x = block(tape, format!("{}dec{}.c2", self.prefix, l), x, true)?;
        }
        let logits = block(tape, format!("{}head", self.prefix), x, false)?;
        tape.softmax(logits, 0)
    }

    /// Forward pass with parameters bound from the store.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        binding: &mut Binding,
        input: TensorRef,
    ) -> Result<TensorRef> {
        let mut params = HashMap::new();
        for (name, _) in self.param_specs() {
            params.insert(name.clone(), store.bind(tape, binding, &name)?);
        }
        self.forward_with_params(tape, &params, input)
    }
}

/// Foreground merge: 0 stays background, every ROI code becomes 1.
pub fn coarse_target(labels: &LabelMap) -> LabelMap {
    LabelMap::new(
        labels.dims(),
        labels.labels().iter().map(|&l| (l > 0) as u8).collect(),
    )
    .expect("binary labels are always valid")
}

/// Axis-aligned crop: inclusive minimum corner and extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Box3 {
    pub min: (usize, usize, usize),
    pub extent: (usize, usize, usize),
}

impl Box3 {
    pub fn full(dims: (usize, usize, usize)) -> Box3 {
        Box3 {
            min: (0, 0, 0),
            extent: dims,
        }
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x >= self.min.0
            && x < self.min.0 + self.extent.0
            && y >= self.min.1
            && y < self.min.1 + self.extent.1
            && z >= self.min.2
            && z < self.min.2 + self.extent.2
    }
}

fn axis_range(
    lo: usize,
    hi: usize, // inclusive
    n: usize,
    margin: usize,
    multiple: usize,
) -> (usize, usize) {
    let mut lo = lo.saturating_sub(margin);
    let mut hi = (hi + margin).min(n - 1);
    // grow to the next multiple, preferring the high side, staying in bounds
    let target = (hi - lo + 1).div_ceil(multiple) * multiple;
    let target = target.min(n);
    while hi - lo + 1 < target {
        if hi + 1 < n {
            hi += 1;
        } else {
            lo -= 1;
        }
    }
    (lo, hi - lo + 1)
}

/// Bounding box of suprathreshold foreground probabilities, expanded by
/// `margin`, clamped to the volume, extents rounded up to `multiple`.
/// Falls back to the full volume when nothing passes the threshold.
pub fn crop_box(
    fg_prob: &[f32],
    dims: (usize, usize, usize),
    threshold: f32,
    margin: usize,
    multiple: usize,
) -> Box3 {
    let (nx, ny, nz) = dims;
    debug_assert_eq!(fg_prob.len(), nx * ny * nz);
    let mut lo = (usize::MAX, usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize, 0usize);
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if fg_prob[(z * ny + y) * nx + x] >= threshold {
                    any = true;
                    lo = (lo.0.min(x), lo.1.min(y), lo.2.min(z));
                    hi = (hi.0.max(x), hi.1.max(y), hi.2.max(z));
                }
            }
        }
    }
    if !any {
        return Box3::full(dims);
    }
    let (x0, ex) = axis_range(lo.0, hi.0, nx, margin, multiple);
    let (y0, ey) = axis_range(lo.1, hi.1, ny, margin, multiple);
    let (z0, ez) = axis_range(lo.2, hi.2, nz, margin, multiple);
    Box3 {
        min: (x0, y0, z0),
        extent: (ex, ey, ez),
    }
}

/// Copies a box out of a multi-channel volume.
pub fn crop_volume(vol: &Volume3, b: Box3) -> Volume3 {
    let (nx, ny, _) = vol.dims();
    let n = vol.num_voxels();
    let (ex, ey, ez) = b.extent;
    let mut out = Vec::with_capacity(vol.channels() * ex * ey * ez);
    for c in 0..vol.channels() {
        for z in 0..ez {
            for y in 0..ey {
                let row = c * n + ((b.min.2 + z) * ny + b.min.1 + y) * nx + b.min.0;
                out.extend_from_slice(&vol.voxels()[row..row + ex]);
            }
        }
    }
    Volume3::new((ex, ey, ez), vol.spacing(), vol.channels(), out)
        .expect("crop buffer matches its extents")
}

pub fn crop_labels(labels: &LabelMap, b: Box3) -> LabelMap {
    let (nx, ny, _) = labels.dims();
    let (ex, ey, ez) = b.extent;
    let mut out = Vec::with_capacity(ex * ey * ez);
    for z in 0..ez {
        for y in 0..ey {
            let row = ((b.min.2 + z) * ny + b.min.1 + y) * nx + b.min.0;
            out.extend_from_slice(&labels.labels()[row..row + ex]);
        }
    }
    LabelMap::new((ex, ey, ez), out).expect("cropped labels stay valid")
}

/// Writes cropped labels back into a full-size map at the box position.
pub fn paste_labels(full: &mut LabelMap, crop: &LabelMap, b: Box3) {
    let (nx, ny, _) = full.dims();
    let (ex, ey, ez) = b.extent;
    for z in 0..ez {
        for y in 0..ey {
            let src = (z * ey + y) * ex;
            let dst = ((b.min.2 + z) * ny + b.min.1 + y) * nx + b.min.0;
            full.labels_mut()[dst..dst + ex].copy_from_slice(&crop.labels()[src..src + ex]);
        }
    }
}

/// Both cascade stages plus training switches.
#[derive(Debug, Clone)]
pub struct TwoStageConfig {
    pub coarse: EncDecConfig,
    pub fine: EncDecConfig,
    pub augment: bool,
}

impl TwoStageConfig {
    /// `use_hard` selects the 21-channel input stack; `use_attention`
    /// enables position attention at both bottlenecks.
    pub fn new(use_hard: bool, use_attention: bool) -> TwoStageConfig {
        let in_channels = if use_hard { 3 + NUM_CLASSES } else { 3 };
        TwoStageConfig {
            coarse: EncDecConfig::new(in_channels, 2, use_attention),
            fine: EncDecConfig::new(in_channels, NUM_CLASSES, use_attention),
            augment: true,
        }
    }

    pub fn use_hard(&self) -> bool {
        self.coarse.in_channels == 3 + NUM_CLASSES
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.fine.validate()?;
        if self.coarse.in_channels != self.fine.in_channels {
            return Err(CoreError::argument(
                "coarse and fine stages must share input channels",
            ));
        }
        Ok(())
    }
}

/// Trained cascade: one store holding "coarse." and "fine." parameters.
#[derive(Debug, Clone)]
pub struct TwoStageModel {
    pub cfg: TwoStageConfig,
    pub store: ParamStore<f32>,
}

const CFG_KEYS: [&str; 7] = [
    "cfg.levels",
    "cfg.base_channels",
    "cfg.in_channels",
    "cfg.out_coarse",
    "cfg.use_attention",
    "cfg.crop_margin",
    "cfg.augment",
];

impl TwoStageModel {
    pub fn init(cfg: TwoStageConfig, seed: u64) -> Result<TwoStageModel> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncDec::new("coarse.", cfg.coarse).init(&mut store, &mut rng)?;
        EncDec::new("fine.", cfg.fine).init(&mut store, &mut rng)?;
        Ok(TwoStageModel { cfg, store })
    }

    pub fn coarse_net(&self) -> EncDec {
        EncDec::new("coarse.", self.cfg.coarse)
    }

    pub fn fine_net(&self) -> EncDec {
        EncDec::new("fine.", self.cfg.fine)
    }

    /// Saves parameters plus the config scalars needed to rebuild the
    /// architecture into one MPAR checkpoint.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut store = self.store.clone();
        let values = [
            self.cfg.coarse.levels as f32,
            self.cfg.coarse.base_channels as f32,
            self.cfg.coarse.in_channels as f32,
            self.cfg.coarse.out_classes as f32,
            self.cfg.coarse.use_attention as u8 as f32,
            self.cfg.coarse.crop_margin as f32,
            self.cfg.augment as u8 as f32,
        ];
        for (key, v) in CFG_KEYS.iter().zip(values) {
            store.register(key, &[1], vec![v])?;
        }
        store.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<TwoStageModel> {
        let store = ParamStore::load(path)?;
        let get = |key: &str| -> Result<f32> { Ok(store.data(key)?[0]) };
        let use_hard = get("cfg.in_channels")? as usize == 3 + NUM_CLASSES;
        let mut cfg = TwoStageConfig::new(use_hard, get("cfg.use_attention")? != 0.0);
        cfg.coarse.levels = get("cfg.levels")? as usize;
        cfg.fine.levels = cfg.coarse.levels;
        cfg.coarse.base_channels = get("cfg.base_channels")? as usize;
        cfg.fine.base_channels = cfg.coarse.base_channels;
        cfg.coarse.crop_margin = get("cfg.crop_margin")? as usize;
        cfg.fine.crop_margin = cfg.coarse.crop_margin;
        cfg.augment = get("cfg.augment")? != 0.0;
        if get("cfg.out_coarse")? as usize != 2 {
            return Err(CoreError::argument("checkpoint has unexpected coarse classes"));
        }
        cfg.validate()?;
        Ok(TwoStageModel { cfg, store })
    }
}

/// Assembles the network input for one subject: bare modalities, or the
/// 21-channel stack when hard attention is on.
pub fn input_stack(
    modalities: &Volume3,
    prior: Option<&AtlasPrior>,
    use_hard: bool,
) -> Result<Volume3> {
    if !use_hard {
        if modalities.channels() != 3 {
            return Err(CoreError::argument(format!(
                "expected 3 modality channels, got {}",
                modalities.channels()
            )));
        }
        return Ok(modalities.clone());
    }
    let prior = prior.ok_or_else(|| {
        CoreError::argument("hard attention requires an atlas prior for every subject")
    })?;
    build_network_input(modalities, prior, true)
}

/// Mirrors an input stack; an x flip also swaps the lateralized prior
/// channels (3 + code) so the prior keeps describing the flipped anatomy.
pub fn flip_stack(stack: &Volume3, axes: FlipAxes) -> Volume3 {
    let flipped = flip_volume(stack, axes);
    if !axes.x || stack.channels() != 3 + NUM_CLASSES {
        return flipped;
    }
    let n = flipped.num_voxels();
    let mut voxels = flipped.voxels().to_vec();
    for code in 1..NUM_CLASSES as u8 {
        let partner = RoiId::flip_code(code);
        if partner > code {
            let a = (3 + code as usize) * n;
            let b = (3 + partner as usize) * n;
            for i in 0..n {
                voxels.swap(a + i, b + i);
            }
        }
    }
    flipped.with_voxels(voxels).expect("swap preserves length")
}

fn one_hot(labels: &LabelMap, classes: usize) -> Vec<f32> {
    let n = labels.num_voxels();
    let mut out = vec![0.0f32; classes * n];
    for (i, &l) in labels.labels().iter().enumerate() {
        out[l as usize * n + i] = 1.0;
    }
    out
}

fn volume_tensor(tape: &mut Tape<f32>, vol: &Volume3) -> Result<TensorRef> {
    let (nx, ny, nz) = vol.dims();
    tape.constant(&[vol.channels(), nz, ny, nx], vol.voxels().to_vec())
}

/// One stage's loss: forward, dice + cross-entropy against one-hot labels,
/// backward, gradients accumulated into the store.
fn stage_step(
    net: &EncDec,
    store: &mut ParamStore<f32>,
    stack: &Volume3,
    labels: &LabelMap,
) -> Result<f64> {
    let (nx, ny, nz) = labels.dims();
    let mut tape: Tape<f32> = Tape::new();
    let mut binding = Binding::new();
    let input = volume_tensor(&mut tape, stack)?;
    let probs = net.forward(&mut tape, store, &mut binding, input)?;
    let target = tape.constant(
        &[net.cfg().out_classes, nz, ny, nx],
        one_hot(labels, net.cfg().out_classes),
    )?;
    let dl = tape.dice_loss(probs, target)?;
    let ce = tape.cross_entropy(probs, target)?;
    let loss = tape.add(dl, ce)?;
    let value = tape.data(loss)[0] as f64;
    if !value.is_finite() {
        return Err(CoreError::Numerical("training loss is not finite".into()));
    }
    tape.backward(loss)?;
    store.accumulate_grads(&tape, &binding);
    Ok(value)
}

/// Trains the cascade for `steps` SGD steps, cycling through subjects in
/// order with per-axis random flips. Fine-stage crops come from the
/// ground-truth foreground box. Returns per-step (coarse, fine) losses.
pub fn train_two_stage(
    subjects: &[(Volume3, LabelMap)],
    priors: Option<&[AtlasPrior]>,
    cfg: &TwoStageConfig,
    sgd: &SgdConfig,
    steps: usize,
    seed: u64,
) -> Result<(TwoStageModel, Vec<(f64, f64)>)> {
    cfg.validate()?;
    sgd.validate()?;
    if subjects.is_empty() {
        return Err(CoreError::argument("training needs at least one subject"));
    }
    if let Some(p) = priors {
        if p.len() != subjects.len() {
            return Err(CoreError::argument(
                "priors must align one-to-one with subjects",
            ));
        }
    }
    let use_hard = cfg.use_hard();
    if use_hard && priors.is_none() {
        return Err(CoreError::argument(
            "hard-attention training requires atlas priors",
        ));
    }
    let stacks: Vec<Volume3> = subjects
        .iter()
        .enumerate()
        .map(|(i, (m, _))| input_stack(m, priors.map(|p| &p[i]), use_hard))
        .collect::<Result<_>>()?;
    let mut model = TwoStageModel::init(cfg.clone(), seed)?;
    let coarse_net = model.coarse_net();
    let fine_net = model.fine_net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx = step % subjects.len();
        let axes = if cfg.augment {
            FlipAxes::new(rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5))
        } else {
            FlipAxes::none()
        };
        let stack = flip_stack(&stacks[idx], axes);
        let labels = flip_labels(&subjects[idx].1, axes);
        let coarse_loss = stage_step(&coarse_net, &mut model.store, &stack, &coarse_target(&labels))?;
        let fg = coarse_target(&labels);
        let fg_prob: Vec<f32> = fg.labels().iter().map(|&l| l as f32).collect();
        let b = crop_box(
            &fg_prob,
            labels.dims(),
            0.5,
            cfg.fine.crop_margin,
            cfg.fine.grid_multiple(),
        );
        let fine_loss = stage_step(
            &fine_net,
            &mut model.store,
            &crop_volume(&stack, b),
            &crop_labels(&labels, b),
        )?;
        model.store.sgd_step(sgd, step)?;
        history.push((coarse_loss, fine_loss));
    }
    Ok((model, history))
}

fn forward_probs(
    net: &EncDec,
    store: &ParamStore<f32>,
    stack: &Volume3,
) -> Result<(Vec<f32>, (usize, usize, usize))> {
    let mut tape: Tape<f32> = Tape::new();
    let mut binding = Binding::new();
    let input = volume_tensor(&mut tape, stack)?;
    let probs = net.forward(&mut tape, store, &mut binding, input)?;
    Ok((tape.data(probs).to_vec(), stack.dims()))
}

/// Cascaded inference: coarse foreground, crop, fine classes, labels
/// pasted back into a background-initialized full-size map.
pub fn infer(
    model: &TwoStageModel,
    modalities: &Volume3,
    prior: Option<&AtlasPrior>,
) -> Result<LabelMap> {
    let stack = input_stack(modalities, prior, model.cfg.use_hard())?;
    let (coarse, dims) = forward_probs(&model.coarse_net(), &model.store, &stack)?;
    let n = stack.num_voxels();
    let b = crop_box(
        &coarse[n..2 * n],
        dims,
        0.5,
        model.cfg.fine.crop_margin,
        model.cfg.fine.grid_multiple(),
    );
    let cropped = crop_volume(&stack, b);
    let (fine, fdims) = forward_probs(&model.fine_net(), &model.store, &cropped)?;
    let fn_vox = fdims.0 * fdims.1 * fdims.2;
    let classes = model.cfg.fine.out_classes;
    let mut crop_lab = vec![0u8; fn_vox];
    for i in 0..fn_vox {
        let mut best = 0usize;
        for c in 1..classes {
            if fine[c * fn_vox + i] > fine[best * fn_vox + i] {
                best = c;
            }
        }
        crop_lab[i] = best as u8;
    }
    let crop_map = LabelMap::new(fdims, crop_lab)?;
    let mut full = LabelMap::zeros(dims);
    paste_labels(&mut full, &crop_map, b);
    Ok(full)
}
