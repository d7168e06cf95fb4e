//! End-to-end workflows behind the command-line verbs: simulation, training,
//! evaluation, FLOP benchmarking and mask inspection.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CstError, Result};
use crate::io::{write_pgm, Raster};
use crate::metrics::{MetricReport, SceneMetrics};
use crate::model::{
    count_flops, count_params, load_checkpoint, nominal_selection, save_checkpoint, CstConfig, CstModel,
};
use crate::nn::ParamStore;
use crate::optics::{forward_measure, measurement_width, CodedAperture, HsiCube, Measurement, NoiseSpec};
use crate::rng::{streams, Stream};
use crate::sah_msa::Routing;
use crate::sasm::{reference_mask, selection_count, total_loss_var, BinaryPatchMask};
use crate::synth::{synth_scene, SparsityProfile};
use crate::tensor::{cosine_lr, AdamConfig, Graph, OptimizerState, Precision, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    None,
    Shot11,
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: CstConfig,
    pub seed: u64,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the scenes in batches.
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Square training crop side.
    pub crop: usize,
    /// Random right-angle rotations and flips of training crops.
    pub augment: bool,
    /// Seed of the coded aperture shared by every measurement.
    pub mask_seed: u64,
    pub noise: NoiseMode,
    /// 32 rounds every forward value and stored parameter to f32; 64 keeps f64.
    pub precision: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CstConfig::default(),
            seed: 0,
            epochs: 500,
            iterations_per_epoch: None,
            batch_size: 5,
            lr: 4e-4,
            crop: 256,
            augment: true,
            mask_seed: 0,
            noise: NoiseMode::None,
            precision: 32,
        }
    }
}

impl RunConfig {
    /// 32x32 scenes with 4 bands, micro model, 200 steps.
    pub fn desk() -> Self {
        RunConfig {
            model: CstConfig::micro(),
            epochs: 200,
            iterations_per_epoch: Some(1),
            batch_size: 4,
            lr: 2e-3,
            crop: 32,
            ..RunConfig::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(RunConfig::desk()),
            "full" => Some(RunConfig::default()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| CstError::Config(format!("bad run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// A preset name (`desk`, `full`) or a JSON file.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.exists() {
            if let Some(c) = RunConfig::preset(spec) {
                return Ok(c);
            }
        }
        let text = fs::read_to_string(path)
            .map_err(|e| CstError::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.precision != 32 && self.precision != 64 {
            return Err(CstError::Config(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.iterations_per_epoch == Some(0) {
            return Err(CstError::Config(
                "epochs, batch size and iterations must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(CstError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        self.model.validate_geometry(self.crop, self.crop)
    }

    pub fn graph_precision(&self) -> Precision {
        if self.precision == 32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    pub fn noise_spec(&self, seed: u64) -> NoiseSpec {
        match self.noise {
            NoiseMode::None => NoiseSpec::none(),
            NoiseMode::Shot11 => NoiseSpec::shot11(seed),
        }
    }

    pub fn total_steps(&self, scenes: usize) -> usize {
        let per_epoch = self
            .iterations_per_epoch
            .unwrap_or_else(|| scenes.div_ceil(self.batch_size).max(1));
        self.epochs * per_epoch
    }
}

/// `*.raster` cubes in `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, HsiCube)>> {
    let entries =
        fs::read_dir(dir).map_err(|e| CstError::Data(format!("cannot read dataset {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "raster"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CstError::Data(format!("no .raster scenes in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, Raster::read(&p)?.to_cube()?))
        })
        .collect()
}

fn check_scene(cfg: &CstConfig, name: &str, cube: &HsiCube) -> Result<()> {
    if cube.bands != cfg.bands {
        return Err(CstError::Data(format!(
            "scene {name} has {} bands, model expects {}",
            cube.bands, cfg.bands
        )));
    }
    Ok(())
}

/// Rotates by `quarter_turns * 90` degrees counter-clockwise, then optionally
/// mirrors left-right. Square cubes only.
pub fn augment(cube: &HsiCube, quarter_turns: usize, flip: bool) -> HsiCube {
    let (n, nb) = (cube.height, cube.bands);
    debug_assert_eq!(cube.height, cube.width);
    let mut out = HsiCube::zeros(n, n, nb);
    for y in 0..n {
        for x in 0..n {
            let (mut sy, mut sx) = (y, if flip { n - 1 - x } else { x });
            for _ in 0..quarter_turns % 4 {
                (sy, sx) = (sx, n - 1 - sy);
            }
            for b in 0..nb {
                *out.at_mut(y, x, b) = cube.at(sy, sx, b);
            }
        }
    }
    out
}

fn crop(cube: &HsiCube, y0: usize, x0: usize, size: usize) -> HsiCube {
    let mut out = HsiCube::zeros(size, size, cube.bands);
    for y in 0..size {
        for x in 0..size {
            for b in 0..cube.bands {
                *out.at_mut(y, x, b) = cube.at(y0 + y, x0 + x, b);
            }
        }
    }
    out
}

/// One logged optimizer step. `total` is `l2 + lambda * sparsity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l2: f64,
    pub sparsity: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,l2,ls,total,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l2, r.sparsity, r.total, r.lr));
    }
    s
}

fn round_store(store: &mut ParamStore, precision: Precision) {
    if precision == Precision::F32 {
        for id in store.trainable_ids() {
            for v in store.get_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Trained model with its per-step loss log.
pub struct Trained {
    pub model: CstModel,
    pub store: ParamStore,
    pub log: Vec<LossRow>,
}

/// Adam with cosine annealing on random (augmented) crops.
pub fn train(cfg: &RunConfig, data: &[(String, HsiCube)]) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CstError::Data("training set is empty".into()));
    }
    for (name, cube) in data {
        check_scene(&cfg.model, name, cube)?;
        if cube.height < cfg.crop || cube.width < cfg.crop {
            return Err(CstError::Data(format!(
                "scene {name} ({}x{}) is smaller than the {} crop",
                cube.height, cube.width, cfg.crop
            )));
        }
    }
    let precision = cfg.graph_precision();
    let (model, mut store) = CstModel::new(cfg.model.clone(), cfg.seed)?;
    round_store(&mut store, precision);
    let ids = store.trainable_ids();
    let mut opt = OptimizerState::new(
        &ids.iter().map(|&i| store.get(i).clone()).collect::<Vec<_>>(),
        AdamConfig::default(),
    );
    let aperture = CodedAperture::random(cfg.crop, cfg.crop, cfg.mask_seed);
    let mut sampler = Stream::new(cfg.seed, streams::SAMPLING);
    let total_steps = cfg.total_steps(data.len());
    let lambda = cfg.model.lambda;
    let mut log = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        if cfg.model.resample_hash {
            model.resample_hash(&mut store, cfg.seed, step as u64)?;
        }
        let lr = cosine_lr(step, total_steps, cfg.lr)?;
        let mut g = Graph::with_precision(precision);
        let b = store.bind(&mut g);
        let mut l2s = Vec::with_capacity(cfg.batch_size);
        let mut lss = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (_, cube) = &data[sampler.below(data.len())];
            let y0 = sampler.below(cube.height - cfg.crop + 1);
            let x0 = sampler.below(cube.width - cfg.crop + 1);
            let mut gt = crop(cube, y0, x0, cfg.crop);
            if cfg.augment {
                let k = sampler.below(4);
                let flip = sampler.bernoulli(0.5);
                gt = augment(&gt, k, flip);
            }
            let noise = cfg.noise_spec(sampler.next_u64());
            let y = forward_measure(&gt, &aperture, cfg.model.shift, noise)?;
            let yv = g.constant(y.to_tensor());
            let out = model.forward(&mut g, &b, yv, &aperture, &mut Routing::record())?;
            let loss = total_loss_var(&mut g, out.reconstruction, &gt, out.sparsity, lambda)?;
            l2s.push(loss.l2);
            lss.push(loss.sparsity);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut sum_l2 = l2s[0];
        let mut sum_ls = lss[0];
        for i in 1..l2s.len() {
            sum_l2 = g.add(sum_l2, l2s[i])?;
            sum_ls = g.add(sum_ls, lss[i])?;
        }
        let l2 = g.scale(sum_l2, inv)?;
        let ls = g.scale(sum_ls, inv)?;
        let weighted = g.scale(ls, lambda)?;
        let total = g.add(l2, weighted)?;
        g.backward(total)?;

        let (l2v, lsv) = (g.value(l2).item(), g.value(ls).item());
        log.push(LossRow {
            step: step + 1,
            l2: l2v,
            sparsity: lsv,
            total: l2v + lambda * lsv,
            lr,
        });

        let grads: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                g.grad(b.var(id))
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect();
        let mut params: Vec<Tensor> = ids.iter().map(|&i| store.get(i).clone()).collect();
        opt.step(&mut params, &grads, lr)?;
        for (&id, p) in ids.iter().zip(params) {
            *store.get_mut(id) = p;
        }
        round_store(&mut store, precision);
    }
    Ok(Trained { model, store, log })
}

/// Writes `checkpoint.ckpt`, `loss.csv` and `config.json` into `out`.
pub fn run_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Trained> {
    cfg.validate()?;
    let data = load_dataset(data_dir)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let trained = train(cfg, &data)?;
    save_checkpoint(&out.join("checkpoint.ckpt"), &cfg.model, cfg.seed, &trained.store)?;
    fs::write(out.join("loss.csv"), loss_csv(&trained.log))?;
    Ok(trained)
}

/// Measurement of `cube` under the run's aperture and noise settings.
pub fn measure_scene(cfg: &RunConfig, cube: &HsiCube, noise_seed: u64) -> Result<(Measurement, CodedAperture)> {
    let aperture = CodedAperture::random(cube.height, cube.width, cfg.mask_seed);
    let y = forward_measure(cube, &aperture, cfg.model.shift, cfg.noise_spec(noise_seed))?;
    Ok((y, aperture))
}

fn reconstruct_with(
    model: &CstModel,
    store: &ParamStore,
    y: &Measurement,
    aperture: &CodedAperture,
    precision: Precision,
) -> Result<crate::model::Reconstruction> {
    let mut g = Graph::with_precision(precision);
    let b = store.bind(&mut g);
    let yv = g.constant(y.to_tensor());
    let out = model.forward(&mut g, &b, yv, aperture, &mut Routing::record())?;
    Ok(crate::model::Reconstruction {
        cube: HsiCube::from_tensor(g.value(out.reconstruction))?,
        sparsity: crate::sasm::SparsityMask::from_tensor(g.value(out.sparsity))?,
        initial: HsiCube::from_tensor(g.value(out.initial))?,
        selection: out.selection,
    })
}

/// Reconstructs every scene and scores it against its ground truth.
pub fn evaluate(
    cfg: &RunConfig,
    model: &CstModel,
    store: &ParamStore,
    data: &[(String, HsiCube)],
) -> Result<(MetricReport, Vec<HsiCube>)> {
    let mut report = MetricReport::default();
    let mut recons = Vec::with_capacity(data.len());
    for (i, (name, gt)) in data.iter().enumerate() {
        check_scene(&model.config, name, gt)?;
        model.config.validate_geometry(gt.height, gt.width)?;
        let (y, ap) = measure_scene(cfg, gt, cfg.seed.wrapping_add(i as u64))?;
        let rec = reconstruct_with(model, store, &y, &ap, cfg.graph_precision())?;
        report.scenes.push(SceneMetrics::measure(name.clone(), &rec.cube, gt)?);
        recons.push(rec.cube);
    }
    Ok((report, recons))
}

/// Writes `metrics.csv`, `metrics_per_band.csv`, `config.json` and
/// `reconstructions/<scene>.raster`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<MetricReport> {
    let (model, store) = load_checkpoint(checkpoint)?.into_model()?;
    let mut cfg = cfg.clone();
    cfg.model = model.config.clone();
    let data = load_dataset(data_dir)?;
    let (report, recons) = evaluate(&cfg, &model, &store, &data)?;
    let rdir = out.join("reconstructions");
    fs::create_dir_all(&rdir)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    for ((name, _), cube) in data.iter().zip(&recons) {
        Raster::from_cube(cube).write(&rdir.join(format!("{name}.raster")))?;
    }
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    fs::write(out.join("metrics_per_band.csv"), report.per_band_csv())?;
    Ok(report)
}

/// Synthetic-scene options for [`run_simulate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub shift: usize,
    pub profile: SparsityProfile,
}

/// Summary of a simulation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulateReport {
    pub scene_dims: [usize; 3],
    pub measurement_dims: [usize; 2],
    pub scenes: Vec<String>,
}

/// Synthesizes scenes (or loads them from `inputs`), measures them under one
/// aperture and writes `mask.raster`, `scenes/*.raster` (synthetic only) and
/// `measurements/*.raster`.
pub fn run_simulate(
    cfg: &RunConfig,
    synth: Option<SynthSpec>,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<SimulateReport> {
    let (scenes, shift) = match synth {
        Some(s) => {
            if s.count == 0 {
                return Err(CstError::Config("synthetic scene count must be positive".into()));
            }
            let scenes = (0..s.count)
                .map(|i| {
                    let cube = synth_scene(cfg.seed.wrapping_add(i as u64), s.height, s.width, s.bands, s.profile)?;
                    Ok((format!("scene_{i:03}"), cube))
                })
                .collect::<Result<Vec<_>>>()?;
            (scenes, s.shift)
        }
        None => {
            if inputs.is_empty() {
                return Err(CstError::Config("give scene files or synthetic scene options".into()));
            }
            let scenes = inputs
                .iter()
                .map(|p| {
                    let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    Ok((name, Raster::read(p)?.to_cube()?))
                })
                .collect::<Result<Vec<_>>>()?;
            (scenes, cfg.model.shift)
        }
    };
    let [h, w, nb] = scenes[0].1.dims();
    if let Some((name, c)) = scenes.iter().find(|(_, c)| c.dims() != [h, w, nb]) {
        return Err(CstError::Data(format!(
            "scene {name} is {:?}, expected {:?}",
            c.dims(),
            [h, w, nb]
        )));
    }
    let aperture = CodedAperture::random(h, w, cfg.mask_seed);
    fs::create_dir_all(out.join("measurements"))?;
    Raster::from_aperture(&aperture).write(&out.join("mask.raster"))?;
    if synth.is_some() {
        fs::create_dir_all(out.join("scenes"))?;
    }
    for (i, (name, cube)) in scenes.iter().enumerate() {
        let noise = cfg.noise_spec(cfg.seed.wrapping_add(i as u64));
        let y = forward_measure(cube, &aperture, shift, noise)?;
        Raster::from_measurement(&y).write(&out.join("measurements").join(format!("{name}.raster")))?;
        if synth.is_some() {
            Raster::from_cube(cube).write(&out.join("scenes").join(format!("{name}.raster")))?;
        }
    }
    Ok(SimulateReport {
        scene_dims: [h, w, nb],
        measurement_dims: [h, measurement_width(w, shift, nb)],
        scenes: scenes.into_iter().map(|(n, _)| n).collect(),
    })
}

/// One row of the sigma sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub sigma: f64,
    pub params: usize,
    pub flops: f64,
    pub attention_flops: f64,
    pub selected: [usize; 3],
    pub wall_ms: f64,
}

pub const BENCH_SIGMAS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

/// Counted cost and measured forward time for each sigma on a `size x size`
/// scene; `repeats` forwards are timed per row (0 skips timing).
pub fn bench(cfg: &RunConfig, size: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(BENCH_SIGMAS.len());
    for &sigma in &BENCH_SIGMAS {
        let mut mc = cfg.model.clone();
        mc.sigma = sigma;
        mc.validate()?;
        let selected = nominal_selection(&mc, size, size)?;
        let flops = count_flops(&mc, size, size, selected)?;
        let mut wall_ms = 0.0;
        if repeats > 0 {
            let (model, store) = CstModel::new(mc.clone(), cfg.seed)?;
            let scene = synth_scene(cfg.seed, size, size, mc.bands, SparsityProfile::default())?;
            let (y, ap) = measure_scene(cfg, &scene, cfg.seed)?;
            let start = Instant::now();
            for _ in 0..repeats {
                reconstruct_with(&model, &store, &y, &ap, cfg.graph_precision())?;
            }
            wall_ms = start.elapsed().as_secs_f64() * 1e3 / repeats as f64;
        }
        rows.push(BenchRow {
            sigma,
            params: count_params(&mc),
            flops: flops.total,
            attention_flops: flops.attention,
            selected,
            wall_ms,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("sigma,params,flops,attention_flops,k1,k2,k3,wall_ms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.sigma, r.params, r.flops, r.attention_flops, r.selected[0], r.selected[1], r.selected[2], r.wall_ms
        ));
    }
    s
}

/// Masks of one scene: predicted `M_s`, reference `M*_s` and the selection.
#[derive(Clone, Debug)]
pub struct MaskInspection {
    pub height: usize,
    pub width: usize,
    pub predicted: Vec<f64>,
    pub reference: Vec<f64>,
    pub selection: BinaryPatchMask,
    pub k: usize,
}

impl MaskInspection {
    /// The selection upsampled to pixels, 1 inside chosen patches.
    pub fn selection_image(&self) -> Vec<f64> {
        let p = self.selection.patch;
        let mut img = vec![0.0; self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.selection.is_selected(y / p, x / p) {
                    img[y * self.width + x] = 1.0;
                }
            }
        }
        img
    }
}

/// Runs the model on `scene` with the given sparsity ratio.
pub fn inspect_mask(
    cfg: &RunConfig,
    model: &CstModel,
    store: &ParamStore,
    scene: &HsiCube,
    sigma: f64,
) -> Result<MaskInspection> {
    check_scene(&model.config, "scene", scene)?;
    let mut m = model.clone();
    m.config.sigma = sigma;
    m.config.validate()?;
    let (y, ap) = measure_scene(cfg, scene, cfg.seed)?;
    let rec = reconstruct_with(&m, store, &y, &ap, cfg.graph_precision())?;
    let reference = reference_mask(&rec.cube, scene)?;
    let cells = rec.selection.rows * rec.selection.cols;
    Ok(MaskInspection {
        height: scene.height,
        width: scene.width,
        predicted: rec.sparsity.values,
        reference: reference.values,
        k: selection_count(cells, sigma),
        selection: rec.selection,
    })
}

/// Writes `ms.pgm`, `ms_ref.pgm` and `md.pgm` into `out`.
pub fn run_inspect_mask(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene_path: &Path,
    sigma: Option<f64>,
    out: &Path,
) -> Result<MaskInspection> {
    let (model, store) = load_checkpoint(checkpoint)?.into_model()?;
    let scene = Raster::read(scene_path)?.to_cube()?;
    let sigma = sigma.unwrap_or(model.config.sigma);
    let ins = inspect_mask(cfg, &model, &store, &scene, sigma)?;
    fs::create_dir_all(out)?;
    write_pgm(&out.join("ms.pgm"), ins.height, ins.width, &ins.predicted)?;
    write_pgm(&out.join("ms_ref.pgm"), ins.height, ins.width, &ins.reference)?;
    write_pgm(&out.join("md.pgm"), ins.height, ins.width, &ins.selection_image())?;
    Ok(ins)
}
