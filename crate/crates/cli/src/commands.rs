use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sgmm_core::corpus::{synth_corpus, ManifestEntry, MANIFEST_FILE};
use sgmm_core::dsp::{extract_mfcc, read_mfcc, write_mfcc};
use sgmm_core::gmm::{em_fit, extract_sgmm, read_sgmm, read_ubm, write_sgmm, write_ubm};
use sgmm_core::model::{
    ablate_frontend, evaluate, pool_frames, small_sample_protocol, train, ArchitectureConfig, C3dBiLstm,
    LogisticRegression, Metrics,
};
use sgmm_core::nn::{gradcheck, read_checkpoint, write_checkpoint, Checkpoint};
use sgmm_core::{Corpus, CorpusManifest, MfccMatrix, SgmmTensor, Split};

use crate::config::PipelineConfig;
use crate::stage::{feature_name, Hasher, Stage, Workdir};

/// Relative error above which `gradcheck` fails.
pub const GRAD_TOL: f64 = 1e-4;

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub work: Workdir,
}

fn up_to_date(stage: Stage, what: &Path) {
    println!("{}: up to date ({})", stage.name(), what.display());
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        let work = Workdir::new(&cfg.workdir);
        Self { cfg, work }
    }

    fn corpus_dir(&self) -> PathBuf {
        self.work.dir(Stage::Corpus)
    }

    fn manifest(&self) -> Result<CorpusManifest> {
        self.work.require(Stage::Corpus, "synth")?;
        let path = self.corpus_dir().join(MANIFEST_FILE);
        Ok(CorpusManifest::read(&path)?)
    }

    /// Hash of the manifest and every clip it lists.
    fn corpus_digest(&self, manifest: &CorpusManifest) -> Result<String> {
        let dir = self.corpus_dir();
        let mut h = Hasher::default();
        h.file(&dir.join(MANIFEST_FILE))?;
        for e in &manifest.entries {
            h.file(&dir.join(&e.path))?;
        }
        Ok(h.hex())
    }

    fn labels(manifest: &CorpusManifest) -> Vec<usize> {
        let ids = manifest.device_ids();
        manifest
            .entries
            .iter()
            .map(|e| ids.iter().position(|d| *d == e.device_id).expect("id from the same manifest"))
            .collect()
    }

    fn feature_paths(&self, stage: Stage, manifest: &CorpusManifest, ext: &str) -> Vec<PathBuf> {
        let dir = self.work.dir(stage);
        manifest.entries.iter().map(|e| dir.join(feature_name(&e.path, ext))).collect()
    }

    pub fn synth(&self) -> Result<()> {
        let dir = self.corpus_dir();
        let key = Hasher::default().part("synth").part(self.cfg.section_text("corpus.")).hex();
        let manifest_path = dir.join(MANIFEST_FILE);
        if self.work.is_fresh(Stage::Corpus, &key, std::slice::from_ref(&manifest_path)) {
            up_to_date(Stage::Corpus, &manifest_path);
            return Ok(());
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        let manifest = synth_corpus(&self.cfg.corpus, &dir)?;
        self.work.mark(Stage::Corpus, &key)?;
        println!("wrote {} ({} clips)", manifest_path.display(), manifest.entries.len());
        for (device, (train, test)) in manifest.split_counts() {
            println!("  {device}: {train} train, {test} test");
        }
        Ok(())
    }

    fn mfcc_key(&self, manifest: &CorpusManifest) -> Result<String> {
        let corpus = self.corpus_digest(manifest)?;
        Ok(Hasher::default().part("mfcc").part(corpus).part(self.cfg.section_text("dsp.")).hex())
    }

    pub fn mfcc(&self) -> Result<()> {
        let manifest = self.manifest()?;
        let key = self.mfcc_key(&manifest)?;
        let outputs = self.feature_paths(Stage::Mfcc, &manifest, "mfcc");
        let dir = self.work.ensure(Stage::Mfcc)?;
        if self.work.is_fresh(Stage::Mfcc, &key, &outputs) {
            up_to_date(Stage::Mfcc, &dir);
            return Ok(());
        }
        let base = self.corpus_dir();
        manifest.entries.par_iter().zip(&outputs).try_for_each(|(e, out)| -> Result<()> {
            let clip = manifest.load_clip(&base, e)?;
            let mfcc = extract_mfcc(&clip, &self.cfg.frame, &self.cfg.mel).with_context(|| e.path.clone())?;
            write_mfcc(out, &mfcc)?;
            Ok(())
        })?;
        self.work.mark(Stage::Mfcc, &key)?;
        println!("wrote {} MFCC files to {}", outputs.len(), dir.display());
        Ok(())
    }

    fn load_mfccs(&self, manifest: &CorpusManifest) -> Result<Vec<MfccMatrix>> {
        self.feature_paths(Stage::Mfcc, manifest, "mfcc")
            .par_iter()
            .map(|p| read_mfcc(p, self.cfg.frame, self.cfg.mel).with_context(|| format!("loading {}", p.display())))
            .collect()
    }

    fn ubm_path(&self) -> PathBuf {
        self.work.dir(Stage::Ubm).join("ubm.dgmm")
    }

    fn ubm_key(&self) -> Result<String> {
        let mfcc = self.work.require(Stage::Mfcc, "mfcc")?;
        let c = &self.cfg;
        Ok(Hasher::default()
            .part("ubm")
            .part(mfcc)
            .part(format!("{} {} {} {}", c.em.n_components, c.em.max_iters, c.em.tol, c.em.seed))
            .hex())
    }

    pub fn train_ubm(&self) -> Result<()> {
        let manifest = self.manifest()?;
        let key = self.ubm_key()?;
        let out = self.ubm_path();
        if self.work.is_fresh(Stage::Ubm, &key, std::slice::from_ref(&out)) {
            up_to_date(Stage::Ubm, &out);
            return Ok(());
        }
        let mfccs = self.load_mfccs(&manifest)?;
        let train_mfccs = manifest.entries.iter().zip(&mfccs).filter(|(e, _)| e.split == Split::Train).map(|(_, m)| m);
        let frames = pool_frames(train_mfccs).context("no training MFCCs to pool")?;
        let fit = em_fit(&frames, &self.cfg.em)?;
        let n = frames.len() as f64;
        let mut log = String::from("iteration,log_likelihood_per_frame\n");
        for (i, ll) in fit.log_likelihoods.iter().enumerate() {
            log.push_str(&format!("{i},{}\n", ll / n));
        }
        self.work.ensure(Stage::Ubm)?;
        write_ubm(&out, &fit.gmm)?;
        write(&self.work.dir(Stage::Ubm).join("em.csv"), &log)?;
        self.work.mark(Stage::Ubm, &key)?;
        for (i, ll) in fit.log_likelihoods.iter().enumerate() {
            println!("  iteration {i}: log-likelihood per frame {:.6}", ll / n);
        }
        println!(
            "wrote {} (G={}, {} frames, {} iterations, converged {}, final log-likelihood per frame {:.6})",
            out.display(),
            fit.gmm.n_components(),
            frames.len(),
            fit.iterations,
            fit.converged,
            fit.final_log_likelihood() / n
        );
        if fit.degenerate {
            eprintln!("warning: every training frame was identical; the UBM is degenerate");
        }
        Ok(())
    }

    fn sgmm_key(&self) -> Result<String> {
        let ubm = self.work.stamp(Stage::Ubm).filter(|_| self.ubm_path().exists()).with_context(|| {
            format!("UBM not found at {}; run `sgmm train-ubm` first", self.ubm_path().display())
        })?;
        let mfcc = self.work.require(Stage::Mfcc, "mfcc")?;
        let s = &self.cfg.sgmm;
        Ok(Hasher::default()
            .part("sgmm")
            .part(ubm)
            .part(mfcc)
            .part(format!("{} {} {}", s.frames_per_segment, s.relevance, s.append_covariances))
            .hex())
    }

    pub fn sgmm(&self) -> Result<()> {
        let manifest = self.manifest()?;
        let key = self.sgmm_key()?;
        let outputs = self.feature_paths(Stage::Sgmm, &manifest, "sgmm");
        let dir = self.work.ensure(Stage::Sgmm)?;
        if self.work.is_fresh(Stage::Sgmm, &key, &outputs) {
            up_to_date(Stage::Sgmm, &dir);
            return Ok(());
        }
        let ubm = read_ubm(&self.ubm_path())?;
        let mfccs = self.load_mfccs(&manifest)?;
        let dims = mfccs
            .par_iter()
            .zip(&outputs)
            .map(|(m, out)| {
                let t = extract_sgmm(&ubm, m, &self.cfg.sgmm).with_context(|| out.display().to_string())?;
                write_sgmm(out, &t)?;
                Ok(t.dims())
            })
            .collect::<Result<Vec<_>>>()?;
        self.work.mark(Stage::Sgmm, &key)?;
        println!("wrote {} SGMM tensors of shape {:?} to {}", outputs.len(), dims[0], dir.display());
        Ok(())
    }

    fn load_sgmm(&self, manifest: &CorpusManifest, split: Split) -> Result<Vec<(SgmmTensor, usize)>> {
        self.work.require(Stage::Sgmm, "sgmm")?;
        let labels = Self::labels(manifest);
        let paths = self.feature_paths(Stage::Sgmm, manifest, "sgmm");
        let picked: Vec<(&ManifestEntry, (&PathBuf, usize))> =
            manifest.entries.iter().zip(paths.iter().zip(labels)).filter(|(e, _)| e.split == split).collect();
        if picked.is_empty() {
            bail!("no {split} clips in the manifest");
        }
        picked
            .par_iter()
            .map(|(_, (p, l))| Ok((read_sgmm(p).with_context(|| format!("loading {}", p.display()))?, *l)))
            .collect()
    }

    fn architecture(&self, sample: &SgmmTensor, n_classes: usize) -> ArchitectureConfig {
        let (m, g, t) = sample.dims();
        ArchitectureConfig {
            hidden: self.cfg.hidden,
            attention: self.cfg.attention,
            ..ArchitectureConfig::toy(m, g, t, n_classes)
        }
    }

    fn model_path(&self) -> PathBuf {
        self.work.dir(Stage::Model).join("model.ckpt")
    }

    fn model_key(&self) -> Result<String> {
        let sgmm = self.work.require(Stage::Sgmm, "sgmm")?;
        Ok(Hasher::default()
            .part("train")
            .part(sgmm)
            .part(self.cfg.section_text("arch."))
            .part(self.cfg.section_text("train."))
            .part(self.cfg.train.seed.to_le_bytes())
            .hex())
    }

    pub fn train(&self) -> Result<()> {
        let manifest = self.manifest()?;
        let key = self.model_key()?;
        let out = self.model_path();
        if self.work.is_fresh(Stage::Model, &key, std::slice::from_ref(&out)) {
            up_to_date(Stage::Model, &out);
            return Ok(());
        }
        let samples = self.load_sgmm(&manifest, Split::Train)?;
        let arch = self.architecture(&samples[0].0, manifest.device_ids().len());
        let mut model = C3dBiLstm::new(&arch, self.cfg.train.seed)?;
        println!("training {} parameters on {} clips", model.n_trainable(), samples.len());
        let history = train(&mut model, &samples, &self.cfg.train)?;
        let dir = self.work.ensure(Stage::Model)?;
        write_checkpoint(&out, &Checkpoint::from_store(model.store(), None))?;
        write(&dir.join("history.csv"), &history.to_csv())?;
        self.work.mark(Stage::Model, &key)?;
        if let Some(last) = history.epochs.last() {
            println!(
                "epoch {}: loss {:.4}, train accuracy {:.3}, lr {}",
                last.epoch, last.loss, last.train_accuracy, last.lr
            );
        }
        println!("wrote {}", out.display());
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        let manifest = self.manifest()?;
        let model_key = self.work.require(Stage::Model, "train")?;
        let key = Hasher::default()
            .part("eval")
            .part(model_key)
            .part(self.work.require(Stage::Sgmm, "sgmm")?)
            .part(self.cfg.section_text("baseline."))
            .hex();
        let dir = self.work.ensure(Stage::Eval)?;
        let metrics_path = dir.join("metrics.txt");
        let baseline_path = dir.join("baseline.txt");
        if self.work.is_fresh(Stage::Eval, &key, &[metrics_path.clone(), baseline_path.clone()]) {
            up_to_date(Stage::Eval, &metrics_path);
            for (name, p) in [("c3d-bilstm", &metrics_path), ("baseline", &baseline_path)] {
                let text = fs::read_to_string(p)?;
                let acc = Metrics::parse_record(&text, "accuracy").context("metrics file lacks accuracy")?;
                println!("{name} accuracy {acc:.4}");
            }
            return Ok(());
        }
        let names = manifest.device_ids();
        let test = self.load_sgmm(&manifest, Split::Test)?;
        let arch = self.architecture(&test[0].0, names.len());
        let mut model = C3dBiLstm::new(&arch, self.cfg.train.seed)?;
        read_checkpoint(&self.model_path())?.load_into(model.store_mut(), None)?;
        let c3d = evaluate(&mut model, &test)?;

        let mfccs = self.load_mfccs(&manifest)?;
        let labels = Self::labels(&manifest);
        let (mut tr, mut te) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
        for ((e, m), l) in manifest.entries.iter().zip(&mfccs).zip(labels) {
            let side = if e.split == Split::Train { &mut tr } else { &mut te };
            side.0.push(m.mean_vector());
            side.1.push(l);
        }
        let baseline = LogisticRegression::fit(&tr.0, &tr.1, &self.cfg.baseline)?.evaluate(&te.0, &te.1)?;

        write(&metrics_path, &c3d.to_records())?;
        write(&dir.join("confusion.csv"), &c3d.confusion_csv(&names))?;
        write(&baseline_path, &baseline.to_records())?;
        self.work.mark(Stage::Eval, &key)?;
        print!("{}", c3d.report(&names));
        println!("c3d-bilstm accuracy {:.4}", c3d.accuracy);
        println!("baseline accuracy {:.4}", baseline.accuracy);
        Ok(())
    }

    fn load_corpus(&self) -> Result<(Corpus, String)> {
        let manifest = self.manifest()?;
        let digest = self.corpus_digest(&manifest)?;
        Ok((Corpus::from_manifest(&manifest, &self.corpus_dir())?, digest))
    }

    pub fn ablate(&self) -> Result<()> {
        let (corpus, digest) = self.load_corpus()?;
        let key = Hasher::default()
            .part("ablate")
            .part(digest)
            .part(self.cfg.section_text("ablate."))
            .part(self.cfg.section_text("dsp."))
            .part(self.cfg.section_text("baseline."))
            .hex();
        let dir = self.work.ensure(Stage::Ablate)?;
        let out = dir.join("table.csv");
        if self.work.is_fresh(Stage::Ablate, &key, std::slice::from_ref(&out)) {
            up_to_date(Stage::Ablate, &out);
            return Ok(());
        }
        let table = ablate_frontend(&corpus, &self.cfg.ablation_grid(), &self.cfg.baseline)?;
        write(&out, &table.to_csv())?;
        self.work.mark(Stage::Ablate, &key)?;
        print!("{}", table.format());
        println!("wrote {}", out.display());
        Ok(())
    }

    pub fn small_sample(&self) -> Result<()> {
        let (corpus, digest) = self.load_corpus()?;
        let mut cfg_text = self.cfg.clone();
        cfg_text.workdir = PathBuf::new();
        let key = Hasher::default().part("small-sample").part(digest).part(cfg_text.to_text()).hex();
        let dir = self.work.ensure(Stage::SmallSample)?;
        let out = dir.join("metrics.txt");
        if self.work.is_fresh(Stage::SmallSample, &key, std::slice::from_ref(&out)) {
            up_to_date(Stage::SmallSample, &out);
            return Ok(());
        }
        let n = self.cfg.small_per_class;
        let result = small_sample_protocol(&corpus, n, &self.cfg.experiment(), self.cfg.corpus.seed)?;
        let text = format!(
            "per_class={n}\nc3d_accuracy={}\nbaseline_accuracy={}\n",
            result.c3d.accuracy, result.baseline.accuracy
        );
        write(&out, &text)?;
        write(&dir.join("history.csv"), &result.history.to_csv())?;
        self.work.mark(Stage::SmallSample, &key)?;
        println!("{n} training clips per device");
        println!("c3d-bilstm accuracy {:.4}", result.c3d.accuracy);
        println!("baseline accuracy {:.4}", result.baseline.accuracy);
        Ok(())
    }

    pub fn gradcheck(&self) -> Result<()> {
        let reports = gradcheck::run_suite(self.cfg.corpus.seed)?;
        let mut failed = 0;
        for r in &reports {
            let ok = r.max_rel_error < GRAD_TOL;
            failed += usize::from(!ok);
            println!(
                "{:<24} {:>5} checks  max rel error {:.2e}  {}",
                r.name,
                r.n_checked,
                r.max_rel_error,
                if ok { "ok" } else { "FAIL" }
            );
        }
        if failed > 0 {
            bail!("{failed} of {} gradient checks exceeded {GRAD_TOL:e}", reports.len());
        }
        println!("all {} gradient checks below {GRAD_TOL:e}", reports.len());
        Ok(())
    }
}
