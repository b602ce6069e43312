//! Stage orchestration: train or resume every model, run the eavesdropping grid and the
//! defense evaluation, and write the record.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;

use semcloak_core::attacks::{
    attack_seed, closedbox_invert, collect_query_dataset, genai_closedbox_invert, genai_glassbox_invert, glassbox_invert,
    intercept, train_genai_inverse_network, train_inverse_network, AttackConfig, EncoderApi, InverseNet,
};
use semcloak_core::codec::{train_codec, Codec};
use semcloak_core::data::Dataset;
use semcloak_core::generator::{train_generator, Generator};
use semcloak_core::metrics::{train_identity_model, IdentityModel, MetricReport};
use semcloak_core::nn::EpochLog;
use semcloak_core::rng::{derive_seed, stream};
use semcloak_core::signal::{equalize_rows, transmit_rows, ChannelDraw, ChannelSpec};
use semcloak_core::steg::{sample_lhat, sample_pairs, train_steganography, StegModule};
use semcloak_core::Tensor;

use crate::checkpoint;
use crate::config::{AttackGridConfig, ExperimentConfig};
use crate::dataset::{load_dataset, LoadedData};
use crate::error::{HarnessError, Result};
use crate::record::{family_name, AttackInfo, AttackKind, CellRecord, DefenseRow, ExperimentRecord, UtilityRow};

pub const RECORD_FILE: &str = "record.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Training stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Identity,
    Codec,
    Generator,
    Steg,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Identity => "identity",
            Stage::Codec => "codec",
            Stage::Generator => "generator",
            Stage::Steg => "steg",
        }
    }
}

/// A run directory with its configuration, data and lazily trained models.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    /// Reuse checkpoints already in the run directory.
    pub resume: bool,
    pub data: LoadedData,
    pub record: ExperimentRecord,
    identity: Option<IdentityModel>,
    codec: Option<Codec>,
    generator: Option<Generator>,
    steg: Option<StegModule>,
}

fn log_epoch(e: &EpochLog) {
    log::info!("{} epoch {} loss {:.5}", e.stage, e.epoch, e.loss);
}

impl Run {
    /// Opens `cfg.out_dir`, writes the resolved config there and loads the data split.
    pub fn open(cfg: ExperimentConfig, resume: bool) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(crate::error::io_err(&dir))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, cfg.to_toml()?).map_err(crate::error::io_err(&cfg_path))?;
        Self::new(cfg, resume)
    }

    /// A run over `cfg` that writes nothing until a stage trains or a record is saved.
    pub fn new(cfg: ExperimentConfig, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        let data = load_dataset(&cfg.dataset, derive_seed(cfg.seed, "split"))?;
        let record = ExperimentRecord::new(&cfg);
        Ok(Self {
            cfg,
            dir,
            resume,
            data,
            record,
            identity: None,
            codec: None,
            generator: None,
            steg: None,
        })
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.cfg.checkpoint_dir().join(format!("{}.json", stage.name()))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.name())
    }

    /// Loads the stage checkpoint when resuming, otherwise trains and saves it.
    fn stage<T: Serialize + DeserializeOwned>(
        &mut self,
        stage: Stage,
        train: impl FnOnce(&Self) -> Result<(T, Vec<f64>)>,
    ) -> Result<T> {
        let path = self.checkpoint_path(stage);
        if self.resume && path.exists() {
            let (value, hash) = checkpoint::load(&path, stage.name())?;
            log::info!("{} resumed from {}", stage.name(), path.display());
            self.record.checkpoints.insert(stage.name().into(), hash);
            return Ok(value);
        }
        if !self.cfg.train_missing {
            return Err(HarnessError::MissingCheckpoint(stage.name()));
        }
        log::info!("training {}", stage.name());
        let (value, curve) = train(self)?;
        let hash = checkpoint::save(&path, stage.name(), &value)?;
        self.record.checkpoints.insert(stage.name().into(), hash);
        self.record.curves.insert(stage.name().into(), curve);
        Ok(value)
    }

    pub fn identity(&mut self) -> Result<&IdentityModel> {
        if self.identity.is_none() {
            let seed = self.stage_seed(Stage::Identity);
            let m: IdentityModel = self.stage(Stage::Identity, |r| {
                let mut curve = Vec::new();
                let m = train_identity_model(&r.data.train, &r.data.test, &r.cfg.identity, seed, |e, l| {
                    log::info!("identity epoch {e} loss {l:.5}");
                    curve.push(l);
                })?;
                Ok((m, curve))
            })?;
            self.record.identities = m.n_ids;
            self.record.identity_accuracy = m.accuracy;
            self.identity = Some(m);
        }
        Ok(self.identity.as_ref().expect("set above"))
    }

    pub fn codec(&mut self) -> Result<&Codec> {
        if self.codec.is_none() {
            self.identity()?;
            let seed = self.stage_seed(Stage::Codec);
            let c = self.stage(Stage::Codec, |r| {
                let id = r.identity.as_ref().expect("trained first");
                Ok(train_codec(&r.data.train, id, &r.cfg.codec, seed, &mut log_epoch)?)
            })?;
            self.codec = Some(c);
        }
        Ok(self.codec.as_ref().expect("set above"))
    }

    pub fn generator(&mut self) -> Result<&Generator> {
        if self.generator.is_none() {
            let seed = self.stage_seed(Stage::Generator);
            let g = self.stage(Stage::Generator, |r| {
                Ok(train_generator(&r.data.train, &r.cfg.generator, seed, &mut log_epoch)?)
            })?;
            self.generator = Some(g);
        }
        Ok(self.generator.as_ref().expect("set above"))
    }

    pub fn steg(&mut self) -> Result<&StegModule> {
        if self.steg.is_none() {
            self.codec()?;
            let seed = self.stage_seed(Stage::Steg);
            let s = self.stage(Stage::Steg, |r| {
                let codec = r.codec.as_ref().expect("trained first");
                Ok(train_steganography(&r.data.train, codec, &r.cfg.steg, seed, &mut log_epoch)?)
            })?;
            self.steg = Some(s);
        }
        Ok(self.steg.as_ref().expect("set above"))
    }

    /// The test images attacks are scored on.
    pub fn eval_set(&self) -> Dataset {
        let n = self.cfg.attacks.eval_limit.unwrap_or(usize::MAX).min(self.data.test.len());
        self.data.test.select(&(0..n).collect::<Vec<_>>())
    }

    /// Closed-box probe images: the first `M` training images.
    pub fn probes(&self) -> Tensor<f64> {
        let m = self.cfg.attacks.probes.min(self.data.train.len());
        self.data.train.batch(&(0..m).collect::<Vec<_>>())
    }

    fn needs_generator(&self) -> bool {
        self.cfg.attacks.strategies.iter().any(|s| s.uses_prior())
    }

    /// Trains or loads every stage the configuration needs. Failures of the generator and
    /// steganography stages are recorded and the dependent evaluations skipped.
    pub fn prepare(&mut self) -> Result<()> {
        self.codec()?;
        if self.needs_generator() {
            if let Err(e) = self.generator() {
                self.record.fail(Stage::Generator.name(), e);
            }
        }
        if self.cfg.defense.enabled {
            if let Err(e) = self.steg() {
                self.record.fail(Stage::Steg.name(), e);
            }
        }
        Ok(())
    }

    pub fn models(&self) -> Option<Models<'_>> {
        Some(Models {
            identity: self.identity.as_ref()?,
            codec: self.codec.as_ref()?,
            generator: self.generator.as_ref(),
            steg: self.steg.as_ref(),
        })
    }

    /// Runs the attack grid, the defense table and Bob's utility sweep on the prepared
    /// models, then writes the record and metrics log.
    pub fn evaluate(&mut self) -> Result<ExperimentRecord> {
        let eval = self.eval_set();
        let probes = self.probes();
        let models = self.models().ok_or(HarnessError::MissingCheckpoint("codec"))?;
        let mut record = self.record.clone();
        let cache = NetCache::default();
        let ctx = EvalContext {
            cfg: &self.cfg,
            models,
            eval: &eval,
            probes: &probes,
            cache: &cache,
        };
        ctx.attack_grid(&mut record);
        if self.cfg.defense.enabled && models.steg.is_some() {
            ctx.defense(&mut record);
        }
        record.save(&self.dir.join(RECORD_FILE))?;
        record.write_metrics_log(&self.dir.join(METRICS_FILE))?;
        self.record = record.clone();
        Ok(record)
    }
}

/// Trains or resumes every stage, evaluates, and writes the record under `cfg.out_dir`.
pub fn run_experiment(cfg: ExperimentConfig, resume: bool) -> Result<ExperimentRecord> {
    let mut run = Run::open(cfg, resume)?;
    run.prepare()?;
    run.evaluate()
}

/// Re-evaluates a record from its checkpoints, which must carry the recorded content
/// hashes. `checkpoints` overrides the recorded checkpoint directory. Nothing is written.
pub fn replay(record: &ExperimentRecord, checkpoints: Option<&Path>) -> Result<ExperimentRecord> {
    let mut cfg = record.config.clone();
    if let Some(d) = checkpoints {
        cfg.checkpoint_dir = Some(d.to_path_buf());
    }
    cfg.train_missing = false;
    let mut run = Run::new(cfg, true)?;
    run.prepare()?;
    for (stage, hash) in &record.checkpoints {
        match run.record.checkpoints.get(stage) {
            Some(h) if h == hash => {}
            other => {
                return Err(HarnessError::HashMismatch {
                    path: run.cfg.checkpoint_dir().join(format!("{stage}.json")),
                    expected: hash.clone(),
                    actual: other.cloned().unwrap_or_default(),
                })
            }
        }
    }
    let eval = run.eval_set();
    let probes = run.probes();
    let models = run.models().ok_or(HarnessError::MissingCheckpoint("codec"))?;
    let mut fresh = ExperimentRecord::new(&run.cfg);
    fresh.config = record.config.clone();
    fresh.config_hash = record.config_hash.clone();
    fresh.checkpoints = run.record.checkpoints.clone();
    fresh.identities = run.record.identities;
    fresh.identity_accuracy = run.record.identity_accuracy;
    let cache = NetCache::default();
    let ctx = EvalContext {
        cfg: &run.cfg,
        models,
        eval: &eval,
        probes: &probes,
        cache: &cache,
    };
    ctx.attack_grid(&mut fresh);
    if run.cfg.defense.enabled && models.steg.is_some() {
        ctx.defense(&mut fresh);
    }
    Ok(fresh)
}

/// Borrowed views of the trained models.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub identity: &'a IdentityModel,
    pub codec: &'a Codec,
    pub generator: Option<&'a Generator>,
    pub steg: Option<&'a StegModule>,
}

/// Inverse networks keyed by (strategy, channel), shared between the grid and the
/// defense table. Entries depend only on their key and seed, so reuse is exact.
#[derive(Default)]
pub struct NetCache {
    nets: Mutex<HashMap<String, Arc<(InverseNet, usize)>>>,
}

impl NetCache {
    fn get_or_train(&self, key: String, train: impl FnOnce() -> Result<(InverseNet, usize)>) -> Result<Arc<(InverseNet, usize)>> {
        if let Some(n) = self.nets.lock().expect("cache lock").get(&key) {
            return Ok(n.clone());
        }
        let n = Arc::new(train()?);
        self.nets.lock().expect("cache lock").insert(key, n.clone());
        Ok(n)
    }
}

/// Everything one attack needs besides the intercepted signal.
pub struct AttackInputs<'a> {
    /// Query access for the closed-box strategies.
    pub api: &'a (dyn EncoderApi + Sync),
    /// Full encoder internals for the glass-box strategies and the legitimate decoder.
    pub codec: &'a Codec,
    pub generator: Option<&'a Generator>,
    pub probes: &'a Tensor<f64>,
    pub grid: &'a AttackGridConfig,
    pub cache: Option<&'a NetCache>,
}

/// Seed of Eve's channel draw for one channel, shared by all attacks on it so that they
/// are compared on the same received signals.
pub fn channel_seed(base: u64, spec: &ChannelSpec) -> u64 {
    derive_seed(base, &format!("eve-channel-{}-{}", family_name(spec.family), spec.snr_db))
}

pub fn kind_seed(base: u64, kind: AttackKind, spec: &ChannelSpec) -> u64 {
    match kind {
        AttackKind::Strategy(s) => attack_seed(base, s, spec),
        AttackKind::Decoder => derive_seed(base, &format!("deepjscc-{}-{}", family_name(spec.family), spec.snr_db)),
    }
}

/// Intercepts the transmitted signals `z` on Eve's link and reconstructs images with
/// the chosen attack.
pub fn run_attack(
    kind: AttackKind,
    z: &Tensor<f64>,
    spec: &ChannelSpec,
    inputs: &AttackInputs<'_>,
    chan_seed: u64,
    seed: u64,
) -> Result<(Tensor<f64>, AttackInfo)> {
    let ic = intercept(z, spec, &mut stream(chan_seed, "intercept"))?;
    let mut info = AttackInfo::default();
    let need_gen = || inputs.generator.ok_or(HarnessError::MissingCheckpoint("generator"));
    let images = match kind {
        AttackKind::Decoder => inputs.codec.decode(&ic.equalized)?,
        AttackKind::Strategy(s) if s.is_glass_box() => {
            let cfg = AttackConfig {
                seed,
                ..inputs.grid.attack_config(s).clone()
            };
            let (target, h) = ic.glass_box_view(cfg.eve_csi);
            let out = if s.uses_prior() {
                genai_glassbox_invert(&target, h.as_ref(), inputs.codec, need_gen()?, spec.noise_var(), &cfg)?
            } else {
                glassbox_invert(&target, h.as_ref(), inputs.codec, &cfg)?
            };
            info.iterations = Some(out.iterations);
            info.restarts = Some(out.restarts);
            out.images
        }
        AttackKind::Strategy(s) => {
            let gen = if s.uses_prior() { Some(need_gen()?) } else { None };
            let train = || -> Result<(InverseNet, usize)> {
                let qd = collect_query_dataset(inputs.api, inputs.probes, spec, &mut stream(seed, "queries"))?;
                let (net, _) = match gen {
                    Some(g) => train_genai_inverse_network(&qd, g, &inputs.grid.inverse, seed, &mut log_epoch)?,
                    None => train_inverse_network(&qd, &inputs.grid.inverse, seed, &mut log_epoch)?,
                };
                Ok((net, qd.len()))
            };
            let key = format!("{}-{}", s, seed);
            let entry = match inputs.cache {
                Some(c) => c.get_or_train(key, train)?,
                None => Arc::new(train()?),
            };
            let (net, queries) = &*entry;
            info.validation_mse = Some(net.validation_mse);
            info.queries = Some(*queries);
            match gen {
                Some(g) => genai_closedbox_invert(&ic.equalized, net, g)?,
                None => closedbox_invert(&ic.equalized, net)?,
            }
        }
    };
    Ok((images, info))
}

struct EvalContext<'a> {
    cfg: &'a ExperimentConfig,
    models: Models<'a>,
    eval: &'a Dataset,
    probes: &'a Tensor<f64>,
    cache: &'a NetCache,
}

impl EvalContext<'_> {
    fn inputs(&self) -> AttackInputs<'_> {
        AttackInputs {
            api: self.models.codec,
            codec: self.models.codec,
            generator: self.models.generator,
            probes: self.probes,
            grid: &self.cfg.attacks,
            cache: Some(self.cache),
        }
    }

    fn kinds(&self) -> Vec<AttackKind> {
        let mut kinds = Vec::new();
        if self.cfg.attacks.baseline {
            kinds.push(AttackKind::Decoder);
        }
        kinds.extend(self.cfg.attacks.strategies.iter().map(|&s| AttackKind::Strategy(s)));
        kinds
    }

    /// Evaluates `jobs` on `workers` threads. Each job owns its seeds, so results do not
    /// depend on scheduling.
    fn parallel<J: Sync, R: Send>(&self, jobs: &[J], f: impl Fn(&J) -> R + Sync) -> Vec<R> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..self.cfg.workers.min(jobs.len()).max(1) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = f(&jobs[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("job ran")).collect()
    }

    fn attack_grid(&self, record: &mut ExperimentRecord) {
        let z = match self.models.codec.encode(&self.eval.images) {
            Ok(z) => z,
            Err(e) => return record.fail("attack-grid", e),
        };
        let jobs: Vec<(AttackKind, ChannelSpec)> = self
            .cfg
            .attacks
            .channels()
            .into_iter()
            .flat_map(|spec| self.kinds().into_iter().map(move |k| (k, spec.clone())))
            .collect();
        let inputs = self.inputs();
        let seed = self.cfg.seed;
        let results = self.parallel(&jobs, |(kind, spec)| {
            let (cs, ks) = (channel_seed(seed, spec), kind_seed(seed, *kind, spec));
            log::info!("attack {}", crate::record::cell_key(*kind, spec));
            let (images, info) = run_attack(*kind, &z, spec, &inputs, cs, ks)?;
            let report = MetricReport::compute(&images, &self.eval.images, self.models.identity)?;
            Ok::<_, HarnessError>(CellRecord {
                attack: *kind,
                channel: spec.clone(),
                channel_seed: cs,
                attack_seed: ks,
                info,
                report,
            })
        });
        for ((kind, spec), r) in jobs.iter().zip(results) {
            match r {
                Ok(cell) => record.cells.push(cell),
                Err(e) => record.fail(crate::record::cell_key(*kind, spec), e),
            }
        }
    }

    fn defense(&self, record: &mut ExperimentRecord) {
        if let Err(e) = self.defense_inner(record) {
            record.fail("defense", e);
        }
    }

    fn defense_inner(&self, record: &mut ExperimentRecord) -> Result<()> {
        let steg = self.models.steg.expect("checked by caller");
        let codec = self.models.codec;
        let seed = derive_seed(self.cfg.seed, "defense");
        let pairs = sample_pairs(self.eval, self.eval.len(), &mut stream(seed, "pairs"))?;
        let xh = self.eval.batch(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let xp = self.eval.batch(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let zp = codec.encode(&xp)?;
        let packet = steg.embed(&codec.encode(&xh)?, &zp)?;
        let d = &self.cfg.defense;
        let eve = ChannelSpec::new(d.family, d.eve_snr);
        let kinds = self.kinds();
        let inputs = self.inputs();
        let base = self.cfg.seed;
        let rows = self.parallel(&kinds, |&kind| {
            let (images, info) = run_attack(kind, &packet.z_c, &eve, &inputs, channel_seed(seed, &eve), kind_seed(base, kind, &eve))?;
            Ok::<_, HarnessError>(DefenseRow {
                attack: kind,
                channel: eve.clone(),
                info,
                vs_host: MetricReport::compute(&images, &xh, self.models.identity)?,
                vs_private: MetricReport::compute(&images, &xp, self.models.identity)?,
            })
        });
        for (kind, r) in kinds.iter().zip(rows) {
            match r {
                Ok(row) => record.defense.push(row),
                Err(e) => record.fail(format!("defense/{kind}"), e),
            }
        }
        let lhat = sample_lhat(self.cfg.steg.loss.lhat_mode, zp.batch(), zp.row_len(), &mut stream(seed, "lhat"));
        for &snr in &d.bob_snrs {
            let spec = ChannelSpec::new(d.family, snr);
            let draw = ChannelDraw::sample(&spec, zp.batch(), zp.row_len() / 2, &mut stream(channel_seed(seed, &spec), "bob"));
            let plain = codec.decode(&equalize_rows(&transmit_rows(&zp, &draw), &draw)?)?;
            let received = equalize_rows(&transmit_rows(&packet.z_c, &draw), &draw)?;
            let (_, zp_hat) = steg.extract(&received, &lhat)?;
            let defended = codec.decode(&zp_hat)?;
            record.utility.push(UtilityRow {
                channel: spec,
                undefended: MetricReport::compute(&plain, &xp, self.models.identity)?,
                defended: MetricReport::compute(&defended, &xp, self.models.identity)?,
            });
        }
        Ok(())
    }
}
