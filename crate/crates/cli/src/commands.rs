use crate::*;
use cinecav::biomarkers::{self, BiomarkerConfig};
use cinecav::cav::{self, ConceptSpec, LogisticConfig, CLINICAL_CONCEPTS};
use cinecav::interp::{self, LatentDirection, PcaPoint};
use cinecav::model::{self, ModelConfig, ModelParams, TrainConfig};
use cinecav::phantom::{self, CohortSpec, Dataset, Dims, SegSequence};
use cinecav::Layer;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

type Outcome<T = ()> = std::result::Result<T, Failure>;

pub(crate) fn dispatch(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Biomarkers(a) => biomarkers_cmd(a),
        Cmd::Qc(a) => qc(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::CavTrain(a) => cav_train(a),
        Cmd::CavScore(a) => cav_score(a),
        Cmd::Interp(a) => interp_cmd(a),
        Cmd::Pca(a) => pca(a),
        Cmd::Report(a) => report(a),
    }
}

impl SmoothingArgs {
    /// Rejects an unusable window/order up front so it is reported as a
    /// usage error rather than as every subject failing.
    fn config(&self, frames: usize) -> Outcome<BiomarkerConfig> {
        let cfg = BiomarkerConfig { window: self.window, order: self.order, ..BiomarkerConfig::default() };
        let (w, o) = cfg.savgol(frames);
        biomarkers::savgol_coefficients(w, o)?;
        if w > frames {
            return Err(Failure::Usage(format!("window {w} exceeds the {frames} frames per cycle")));
        }
        Ok(cfg)
    }
}

fn load_dataset(path: &Path) -> Outcome<Dataset> {
    phantom::read_dataset_file(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, dims: Dims) -> Outcome<ModelParams> {
    model::read_model_file(path, dims).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn gen(a: GenArgs) -> Outcome {
    let mut spec = CohortSpec::new(a.n, a.prevalence, a.seed);
    spec.first_id = a.first_id;
    if a.paper_dims {
        spec.dims = Dims::PAPER;
        spec.frames = 50;
    } else {
        spec.dims = Dims::new(a.width, a.height, a.slices)?;
        spec.frames = a.frames;
    }
    if let Some(s) = a.ef_shift {
        spec.effect.ef_shift = s;
    }
    if let Some(tc) = a.test_count {
        if tc >= a.n {
            return Err(Failure::Usage(format!("--test-count {tc} leaves no training subjects out of {}", a.n)));
        }
    }
    let cohort = phantom::generate_cohort(&spec)?;
    match (a.test_count, &a.test_out) {
        (Some(tc), Some(test_out)) => {
            let (train, test) = cohort.dataset.split_at(a.n - tc);
            phantom::write_dataset_file(&a.out, &train)?;
            phantom::write_dataset_file(test_out, &test)?;
            println!("wrote {} subjects to {} and {} to {}", train.len(), a.out.display(), test.len(), test_out.display());
        }
        _ => {
            phantom::write_dataset_file(&a.out, &cohort.dataset)?;
            println!("wrote {} subjects to {}", cohort.dataset.len(), a.out.display());
        }
    }
    if let Some(path) = &a.truth {
        let rows: Vec<_> = cohort
            .dataset
            .subjects
            .iter()
            .zip(&cohort.truth)
            .map(|(s, t)| (s.subject_id, *t, s.label))
            .collect();
        phantom::write_truth_csv(create(path)?, &rows)?;
    }
    Ok(())
}

fn biomarkers_cmd(a: BiomarkerArgs) -> Outcome {
    let data = load_dataset(&a.input)?;
    let mut rows = Vec::new();
    for (s, b) in data.subjects.iter().zip(biomarkers::measure_all(&data.subjects, &a.smoothing.config(data.frames)?)) {
        match b {
            Ok(b) => rows.push((s.subject_id, b)),
            Err(e) => eprintln!("subject {}: {e}", s.subject_id),
        }
    }
    if rows.is_empty() {
        return Err(Failure::Data("no subject could be measured".into()));
    }
    biomarkers::write_biomarker_csv(create(&a.out)?, &rows)?;
    println!("measured {} of {} subjects", rows.len(), data.len());
    Ok(())
}

fn qc(a: QcArgs) -> Outcome {
    let data = load_dataset(&a.input)?;
    let measured = biomarkers::measure_all(&data.subjects, &a.smoothing.config(data.frames)?);
    let kept: Vec<SegSequence> = data
        .subjects
        .iter()
        .zip(&measured)
        .filter(|(_, b)| b.as_ref().is_ok_and(|b| b.qc_pass))
        .map(|(s, _)| s.clone())
        .collect();
    let dropped = data.len() - kept.len();
    println!("kept {} dropped {dropped}", kept.len());
    if kept.is_empty() {
        return Err(Failure::Data("every subject failed quality control; nothing written".into()));
    }
    let out = Dataset::new(data.dims, data.frames, kept)?;
    phantom::write_dataset_file(&a.out, &out)?;
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let data = load_dataset(&a.input)?;
    let model_cfg = ModelConfig { latent: a.latent, ..ModelConfig::new(data.dims, data.frames) };
    let train_cfg = TrainConfig {
        beta: a.beta,
        lr_stage1: a.lr1,
        lr_stage2: a.lr2,
        epochs: (a.epochs1, a.epochs2),
        batch_size: a.batch_size,
        max_shift: a.max_shift,
        clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
        seed: a.seed,
    };
    let verbose = a.verbose;
    let (params, log) = model::train_with_progress(&data, &model_cfg, &train_cfg, |e| {
        if verbose {
            eprintln!(
                "stage {} epoch {} recon {:.3} kl {:.3} class {:.4} total {:.3}",
                e.stage, e.epoch, e.terms.recon, e.terms.kl, e.terms.class, e.terms.total
            );
        }
    })?;
    model::write_model_file(&a.out, &params)?;
    if let Some(path) = &a.log {
        model::write_training_log(create(path)?, &log)?;
    }
    if let Some(last) = log.last() {
        println!("trained {} epochs, final loss {:.4}", log.len(), last.terms.total);
    }
    Ok(())
}

struct Metrics {
    auc: f64,
    dice: f64,
    n: usize,
}

fn metrics(params: &ModelParams, data: &Dataset) -> Outcome<Metrics> {
    let mut scores = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let mut dice_sum = 0.0;
    for s in &data.subjects {
        let label = s.label.ok_or_else(|| Failure::Data(format!("subject {} has no label", s.subject_id)))?;
        scores.push(params.predict(s)?.logit);
        labels.push(label);
        dice_sum += model::dice(&params.reconstruct(s)?, &s.frames)?;
    }
    Ok(Metrics { auc: model::auc(&scores, &labels)?, dice: dice_sum / data.len() as f64, n: data.len() })
}

fn write_metrics(path: &Path, m: &Metrics) -> Outcome {
    let mut w = create(path)?;
    writeln!(w, "auc,dice,n")?;
    writeln!(w, "{},{},{}", m.auc, m.dice, m.n)?;
    w.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let data = load_dataset(&a.input)?;
    let params = load_model(&a.model, data.dims)?;
    let m = metrics(&params, &data)?;
    println!("auc {:.4} dice {:.4} n {}", m.auc, m.dice, m.n);
    if let Some(path) = &a.out {
        write_metrics(path, &m)?;
    }
    Ok(())
}

fn qc_subjects(data: &Dataset, cfg: &BiomarkerConfig) -> Outcome<Vec<SegSequence>> {
    let kept: Vec<SegSequence> = data
        .subjects
        .iter()
        .zip(biomarkers::measure_all(&data.subjects, cfg))
        .filter(|(_, b)| b.as_ref().is_ok_and(|b| b.qc_pass))
        .map(|(s, _)| s.clone())
        .collect();
    if kept.is_empty() {
        return Err(Failure::Data("no subject passes quality control".into()));
    }
    Ok(kept)
}

fn cav_train(a: CavTrainArgs) -> Outcome {
    let layer: Layer = a.layer.parse()?;
    let concepts: Vec<String> =
        if a.concept.is_empty() { CLINICAL_CONCEPTS.iter().map(|c| c.to_string()).collect() } else { a.concept.clone() };
    let specs = concepts.iter().map(|c| ConceptSpec::named(c, a.k)).collect::<cinecav::Result<Vec<_>>>()?;
    let pool = load_dataset(&a.pool)?;
    let params = load_model(&a.model, pool.dims)?;
    let table = biomarkers::qc_passing(&pool.subjects, &a.smoothing.config(pool.frames)?);
    let cfg = LogisticConfig { lambda: a.lambda, ..LogisticConfig::default() };
    std::fs::create_dir_all(&a.out_dir)?;
    for spec in &specs {
        let cv = cav::concept_vector_from_pool(&params, &pool.subjects, &table, spec, layer, &cfg)?;
        let path = a.out_dir.join(format!("{}.csv", spec.name));
        let mut w = create(&path)?;
        cav::write_cav(&mut w, &cv)?;
        w.flush()?;
        println!("{} accuracy {:.3} -> {}", spec.name, cv.accuracy, path.display());
    }
    Ok(())
}

fn load_cav(path: &Path) -> Outcome<cinecav::ConceptVector> {
    let f = File::open(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    cav::read_cav(BufReader::new(f)).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn cav_score(a: CavScoreArgs) -> Outcome {
    let data = load_dataset(&a.input)?;
    let params = load_model(&a.model, data.dims)?;
    let cv = load_cav(&a.cav)?;
    let subjects = qc_subjects(&data, &a.smoothing.config(data.frames)?)?;
    let r = cav::aggregate_sensitivity(&params, &subjects, &cv)?;
    let mut w = create(&a.out)?;
    cav::write_sensitivity(&mut w, &r)?;
    w.flush()?;
    println!("{} fraction_positive {:.3} mean {:.6} n {}", cv.concept, r.fraction_positive, r.mean, r.dots.len());
    Ok(())
}

fn direction(
    params: &ModelParams,
    reference: &Dataset,
    name: &str,
    k: usize,
    cfg: &BiomarkerConfig,
) -> Outcome<LatentDirection> {
    if name == "disease" {
        return Ok(interp::classifier_direction(params, &reference.subjects)?);
    }
    let spec = ConceptSpec::named(name, k)?;
    let table = biomarkers::qc_passing(&reference.subjects, cfg);
    let (pos, neg) = cav::select_concept_sets(&table, &spec)?;
    let pick = |ids: &[u32]| -> Vec<SegSequence> {
        ids.iter().filter_map(|id| reference.subjects.iter().find(|s| s.subject_id == *id).cloned()).collect()
    };
    Ok(interp::latent_concept_direction(params, name, &pick(&pos), &pick(&neg), &LogisticConfig::default())?)
}

fn interp_cmd(a: InterpArgs) -> Outcome {
    let data = load_dataset(&a.input)?;
    let params = load_model(&a.model, data.dims)?;
    let seq = data
        .subjects
        .iter()
        .find(|s| s.subject_id == a.subject)
        .ok_or_else(|| Failure::Data(format!("subject {} is not in {}", a.subject, a.input.display())))?;
    let reference = match &a.pool {
        Some(p) => load_dataset(p)?,
        None => data.clone(),
    };
    let dir = direction(&params, &reference, &a.direction, a.k, &a.smoothing.config(reference.frames)?)?;
    let result = interp::interpolate_decode(&params, seq, &dir, &a.alphas)?;
    let files = interp::write_interpolation(&a.out_dir, &result)?;
    for step in &result.steps {
        println!("alpha {} logit {:.4}", step.alpha, step.logit);
    }
    println!("wrote {} files to {}", files.len(), a.out_dir.display());
    Ok(())
}

/// Projections, per-point gradient arrows and the projected disease direction.
fn pca_points(params: &ModelParams, subjects: &[SegSequence]) -> Outcome<(Vec<PcaPoint>, [f64; 2])> {
    let lat: Vec<Vec<f64>> =
        cav::record_activations(params, subjects, Layer::LatentMean)?.into_iter().map(|r| r.z).collect();
    let pca = interp::pca_project(&lat, 2)?;
    let arrows = interp::gradient_arrows(params, subjects, &pca.axes)?;
    let points = subjects
        .iter()
        .zip(&pca.projections)
        .zip(&arrows)
        .map(|((s, p), g)| PcaPoint { subject_id: s.subject_id, pc: [p[0], p[1]], grad: [g[0], g[1]], label: s.label })
        .collect();
    let dir = interp::classifier_direction(params, subjects)?;
    Ok((points, [cav::dot(&dir.v, &pca.axes[0]), cav::dot(&dir.v, &pca.axes[1])]))
}

fn write_pca(points: &[PcaPoint], dir: [f64; 2], csv: &Path, svg: Option<&Path>) -> Outcome {
    let mut w = create(csv)?;
    interp::write_pca_csv(&mut w, points)?;
    w.flush()?;
    if let Some(svg) = svg {
        let mut w = create(svg)?;
        w.write_all(interp::pca_svg(points, Some(dir)).as_bytes())?;
        w.flush()?;
    }
    Ok(())
}

fn pca(a: PcaArgs) -> Outcome {
    let data = load_dataset(&a.input)?;
    let params = load_model(&a.model, data.dims)?;
    let (points, dir) = pca_points(&params, &data.subjects)?;
    write_pca(&points, dir, &a.out, a.svg.as_deref())?;
    println!("projected {} subjects", points.len());
    Ok(())
}

fn describe(concept: &str) -> &'static str {
    match concept {
        "low_ef" => "Low ejection fraction",
        "low_per" => "Low peak ejection rate",
        "low_pfr" => "Low peak filling rate",
        "low_pafr" => "Low peak atrial filling rate",
        "high_lvt" => "High wall thickening variance",
        "rv_offset" => "Large LV to RV offset (placebo)",
        _ => "",
    }
}

fn digest(path: &Path) -> Outcome<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn report(a: ReportArgs) -> Outcome {
    let inputs: Vec<&Path> =
        [a.model.as_path(), a.input.as_path()].into_iter().chain(a.cav.iter().map(|p| p.as_path())).collect();
    if let Some(missing) = inputs.iter().find(|p| !p.is_file()) {
        return Err(Failure::Usage(format!("missing input {}", missing.display())));
    }
    let data = load_dataset(&a.input)?;
    let params = load_model(&a.model, data.dims)?;
    let cavs = a.cav.iter().map(|p| load_cav(p)).collect::<Outcome<Vec<_>>>()?;
    let bcfg = a.smoothing.config(data.frames)?;
    let scored = qc_subjects(&data, &bcfg)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut outputs = Vec::new();

    let mut table = String::from("concept,description,fraction_positive,mean\n");
    for cv in &cavs {
        let r = cav::aggregate_sensitivity(&params, &scored, cv)?;
        table.push_str(&format!("{},{},{},{}\n", cv.concept, describe(&cv.concept), r.fraction_positive, r.mean));
        let name = format!("sensitivity_{}.csv", cv.concept);
        let mut w = create(&a.out_dir.join(&name))?;
        cav::write_sensitivity(&mut w, &r)?;
        w.flush()?;
        outputs.push(name);
        println!("{:<10} fraction_positive {:.3} mean {:.6}", cv.concept, r.fraction_positive, r.mean);
    }
    std::fs::write(a.out_dir.join("table1.csv"), table)?;
    outputs.push("table1.csv".into());

    let m = metrics(&params, &data)?;
    write_metrics(&a.out_dir.join("metrics.csv"), &m)?;
    outputs.push("metrics.csv".into());
    println!("auc {:.4} dice {:.4} n {}", m.auc, m.dice, m.n);

    let (points, dir) = pca_points(&params, &scored)?;
    write_pca(&points, dir, &a.out_dir.join("pca.csv"), Some(&a.out_dir.join("pca.svg")))?;
    outputs.push("pca.csv".into());
    outputs.push("pca.svg".into());

    let mut manifest = String::from("kind,name,value\n");
    manifest.push_str(&format!("tool,cinecav,{}\n", env!("CARGO_PKG_VERSION")));
    let (window, order) = bcfg.savgol(data.frames);
    manifest.push_str(&format!("config,window,{window}\nconfig,order,{order}\n"));
    manifest.push_str(&format!("config,scored_subjects,{}\n", scored.len()));
    for p in &inputs {
        manifest.push_str(&format!("input,{},{}\n", file_name(p), digest(p)?));
    }
    for name in &outputs {
        manifest.push_str(&format!("output,{name},{}\n", digest(&a.out_dir.join(name))?));
    }
    std::fs::write(a.out_dir.join("manifest.csv"), manifest)?;
    println!("report written to {}", a.out_dir.display());
    Ok(())
}
