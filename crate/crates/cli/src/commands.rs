use anyhow::Result;
use serde_json::json;

use isoclip::align::{self, BandSelection, Modality, ProjectorPair};
use isoclip::retrieval::{self, EvalOptions, Precision};
use isoclip::synthdata::{self, PlantedSpec};
use isoclip::tensorio::{self, DType};
use isoclip::{gradcheck, linearize, ncm, spectral, Error, Execution, Matrix};

use crate::output::{self, num};
use crate::{
    AlignArgs, BandsArgs, ClassifyArgs, GlobalArgs, GradcheckArgs, LinearizeArgs, ModalityArg,
    OverlapArgs, PairArgs, PrecisionArg, ProjectorArgs, RetrieveArgs, SpectrumArgs, SweepArgs,
    SynthArgs, WhitenArgs,
};

impl GlobalArgs {
    fn exec(&self) -> Execution {
        Execution::from_threads(self.threads)
    }

    fn eval(&self) -> EvalOptions {
        EvalOptions {
            precision: match self.precision {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            },
            exec: self.exec(),
        }
    }

    fn dtype(&self) -> DType {
        match self.precision {
            PrecisionArg::F32 => DType::F32,
            PrecisionArg::F64 => DType::F64,
        }
    }
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Text => Modality::Text,
        }
    }
}

fn load_pair(p: &PairArgs) -> Result<ProjectorPair> {
    Ok(ProjectorPair::load(&p.wi, &p.wt)?)
}

/// A tensor file, or the modality's projector from an aligned directory.
fn load_projector(p: &ProjectorArgs) -> Result<Matrix> {
    if p.projector.is_dir() {
        let (pair, _) = align::load_aligned(&p.projector)?;
        Ok(pair.projector(p.modality.into()).clone())
    } else {
        Ok(tensorio::read_matrix(&p.projector)?)
    }
}

fn print(value: &serde_json::Value) -> Result<()> {
    print!("{}", output::to_json(value)?);
    Ok(())
}

/// `start:stop:step` with exclusive stop, or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<usize>> {
    let bad = |msg: String| Error::InvalidParameter(msg);
    let int = |s: &str| {
        s.trim().parse::<usize>().map_err(|_| {
            bad(format!(
                "'{s}' is not a non-negative integer in grid '{spec}'"
            ))
        })
    };
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let (start, stop, step) = match parts.as_slice() {
            [a, b] => (int(a)?, int(b)?, 1),
            [a, b, c] => (int(a)?, int(b)?, int(c)?),
            _ => return Err(bad(format!("grid '{spec}' is not start:stop:step")).into()),
        };
        if step == 0 {
            return Err(bad(format!("grid '{spec}' has zero step")).into());
        }
        (start..stop).step_by(step).collect()
    } else {
        spec.split(',').map(int).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err(bad(format!("grid '{spec}' is empty")).into());
    }
    Ok(values)
}

pub fn spectrum(g: &GlobalArgs, a: &SpectrumArgs) -> Result<()> {
    let pair = load_pair(&a.pair)?;
    let op = align::inter_modal_operator(&pair)?;
    let out = g.out(&a.out, "spectrum.csv");
    let s = op.singular_values();
    output::write_csv(
        &out,
        &["index", "singular_value"],
        s.iter().enumerate().map(|(i, v)| [i.to_string(), num(*v)]),
    )?;
    print(&json!({
        "rank": op.rank(),
        "sigma_max": s.first(),
        "sigma_min": s.last(),
        "csv": out,
    }))
}

pub fn align(g: &GlobalArgs, a: &AlignArgs) -> Result<()> {
    let pair = load_pair(&a.pair)?;
    let aligned = align::isoclip(&pair, a.kt, a.kb)?;
    let out = g.out(&a.out, "aligned");
    aligned.save(&out, g.dtype())?;
    let kept = aligned.band.retained();
    print(&json!({
        "rank": aligned.band.rank,
        "k_t": aligned.band.k_t,
        "k_b": aligned.band.k_b,
        "retained": [kept.start, kept.end],
        "dir": out,
    }))
}

pub fn whiten(g: &GlobalArgs, a: &WhitenArgs) -> Result<()> {
    let w = tensorio::read_matrix(&a.w)?;
    let white = spectral::whiten(&w)?;
    let rank = spectral::svd(&w)?.rank();
    let out = g.out(&a.out, "whitened.iso");
    output::ensure_parent(&out)?;
    tensorio::write_matrix(&out, &white, g.dtype())?;
    print(&json!({ "rank": rank, "shape": [white.nrows(), white.ncols()], "file": out }))
}

pub fn retrieve(g: &GlobalArgs, a: &RetrieveArgs) -> Result<()> {
    let w = load_projector(&a.projector)?;
    let dataset = tensorio::load_dataset(&a.manifest)?;
    let report = retrieval::retrieve(&w, &dataset, &a.p_at_k, g.eval())?;
    let out = g.out(&a.out, "retrieve.json");
    let value = json!({
        "dataset": dataset.name,
        "modality": a.projector.modality,
        "map": report.map,
        "num_queries_scored": report.num_queries_scored,
        "precision_at_k": report.precision_at_k,
        "per_query_ap": report.per_query_ap,
    });
    output::write_json(&out, &value)?;
    print(&json!({
        "dataset": dataset.name,
        "map": report.map,
        "num_queries_scored": report.num_queries_scored,
        "precision_at_k": report.precision_at_k,
        "report": out,
    }))
}

pub fn classify(g: &GlobalArgs, a: &ClassifyArgs) -> Result<()> {
    let w = load_projector(&a.projector)?;
    let train = tensorio::load_dataset(&a.train)?;
    let test = tensorio::load_dataset(&a.test)?;
    let protos = ncm::compute_prototypes(&w, &train.features, &train.labels)?;
    if let Some(dir) = &a.prototypes {
        protos.save(dir)?;
    }
    let report = ncm::classify(&protos, &w, &test.features, &test.labels)?;
    let out = g.out(&a.out, "classify.json");
    let value = json!({
        "train": train.name,
        "test": test.name,
        "classes": protos.len(),
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        "predictions": report.predictions,
    });
    output::write_json(&out, &value)?;
    print(&json!({
        "accuracy": report.accuracy,
        "classes": protos.len(),
        "correct": report.correct,
        "total": report.total,
        "report": out,
    }))
}

pub fn sweep(g: &GlobalArgs, a: &SweepArgs) -> Result<()> {
    let pair = load_pair(&a.pair)?;
    let dataset = tensorio::load_dataset(&a.manifest)?;
    let kt = parse_grid(&a.kt)?;
    let kb = parse_grid(&a.kb)?;
    let result = retrieval::sweep_band(&pair, &dataset, a.modality.into(), &kt, &kb, g.eval())?;
    let out = g.out(&a.out, "sweep.csv");
    output::write_csv(
        &out,
        &["k_t", "k_b", "map"],
        result.cells.iter().map(|c| {
            [
                c.k_t.to_string(),
                c.k_b.to_string(),
                c.map.map(num).unwrap_or_default(),
            ]
        }),
    )?;
    let summary = json!({
        "dataset": dataset.name,
        "modality": a.modality,
        "rank": result.rank,
        "best_k_t": result.best_k_t,
        "best_k_b": result.best_k_b,
        "best_map": result.best_map,
        "grid_points": result.cells.len(),
        "feasible_points": result.cells.iter().filter(|c| c.map.is_some()).count(),
        "csv": out,
    });
    output::write_json(&out.with_extension("json"), &summary)?;
    print(&summary)
}

pub fn overlap(g: &GlobalArgs, a: &OverlapArgs) -> Result<()> {
    let w = load_projector(&a.projector)?;
    let dataset = tensorio::load_dataset(&a.manifest)?;
    let s = retrieval::dataset_similarities(&w, &dataset, g.eval())?;
    let report = retrieval::overlap_report(&s, &dataset.ranking_task(), a.bins)?;
    let out = g.out(&a.out, "overlap.csv");
    output::write_csv(
        &out,
        &["bin_left", "bin_right", "pos_mass", "neg_mass"],
        (0..report.bins).map(|b| {
            let (lo, hi) = report.bin_edges(b);
            [
                num(lo),
                num(hi),
                num(report.pos_hist[b]),
                num(report.neg_hist[b]),
            ]
        }),
    )?;
    let summary = json!({
        "dataset": dataset.name,
        "bins": report.bins,
        "iou": report.iou,
        "pos_mean": report.pos_mean,
        "neg_mean": report.neg_mean,
        "pos_pairs": report.pos_pairs,
        "neg_pairs": report.neg_pairs,
        "csv": out,
    });
    output::write_json(&out.with_extension("json"), &summary)?;
    print(&summary)
}

pub fn gradcheck(g: &GlobalArgs, a: &GradcheckArgs) -> Result<()> {
    let report = gradcheck::run_gradcheck(a.instances, a.dim, a.negatives, g.seed, g.exec())?;
    let out = g.out(&a.out, "gradcheck.json");
    output::write_json(&out, &report)?;
    print(&json!({
        "passed": report.passed,
        "max_similarity_rel_error": report.max_similarity_rel_error,
        "max_loss_rel_error": report.max_loss_rel_error,
        "tolerance": report.tolerance,
        "report": out,
    }))?;
    if !report.passed {
        return Err(Error::Numerical(format!(
            "gradient check exceeded tolerance {:e}",
            report.tolerance
        ))
        .into());
    }
    Ok(())
}

pub fn linearize(g: &GlobalArgs, a: &LinearizeArgs) -> Result<()> {
    let params = linearize::MlpHeadParams::load(&a.head)?;
    let eff = linearize::linearize_head(&params);
    let out = g.out(&a.out, "w_eff.iso");
    output::ensure_parent(&out)?;
    tensorio::write_matrix(&out, &eff.w_eff, g.dtype())?;
    print(&json!({
        "shape": [eff.w_eff.nrows(), eff.w_eff.ncols()],
        "hidden": params.hidden(),
        "file": out,
    }))
}

pub fn synth(g: &GlobalArgs, a: &SynthArgs) -> Result<()> {
    let mut spec = PlantedSpec::acceptance(g.seed);
    if let Some(x) = a.noise {
        spec.noise_sigma = x;
    }
    if let Some(x) = a.nuisance {
        spec.nuisance_ratio = x;
    }
    if let Some(x) = a.per_class {
        spec.per_class = x;
    }
    let truth = synthdata::make_projectors(&spec)?;
    let (image, text) = synthdata::make_embeddings(&spec, &truth)?;
    let dir = g.out(&a.out, "synth");
    let dtype = g.dtype();
    std::fs::create_dir_all(&dir)?;
    tensorio::write_matrix(dir.join("wi.iso"), &truth.pair.wi, dtype)?;
    tensorio::write_matrix(dir.join("wt.iso"), &truth.pair.wt, dtype)?;
    tensorio::write_matrix(dir.join("u.iso"), &truth.u, dtype)?;
    tensorio::write_matrix(dir.join("v.iso"), &truth.v, dtype)?;
    let image_manifest = tensorio::save_dataset(&dir, "image", &image, dtype)?;
    let text_manifest = tensorio::save_dataset(&dir, "text", &text, dtype)?;
    let truth_json = json!({
        "spec": spec,
        "sigma": truth.sigma,
        "warnings": truth.warnings,
        "planted_k_t": spec.n_top,
        "planted_k_b": spec.n_bottom,
    });
    output::write_json(&dir.join("truth.json"), &truth_json)?;
    print(&json!({
        "dir": dir,
        "image_manifest": image_manifest,
        "text_manifest": text_manifest,
        "samples": image.len(),
        "planted_k_t": spec.n_top,
        "planted_k_b": spec.n_bottom,
    }))
}

fn band_map(
    pair: &ProjectorPair,
    op: &align::InterModalOperator,
    band: &BandSelection,
    dataset: &retrieval::EmbeddingDataset,
    modality: Modality,
    opts: EvalOptions,
) -> Result<f64> {
    let aligned = align::align_projectors(pair, op, band)?;
    Ok(retrieval::retrieve(aligned.projector(modality), dataset, &[], opts)?.map)
}

pub fn bands(g: &GlobalArgs, a: &BandsArgs) -> Result<()> {
    let pair = load_pair(&a.pair)?;
    let dataset = tensorio::load_dataset(&a.manifest)?;
    let modality: Modality = a.modality.into();
    let opts = g.eval();
    let op = align::inter_modal_operator(&pair)?;
    let variants = align::band_variants(&op, a.width)?;
    let baseline = retrieval::retrieve(pair.projector(modality), &dataset, &[], opts)?.map;

    let mut rows: Vec<(String, BandSelection, f64)> = Vec::new();
    for (name, band) in [
        ("top", variants.top),
        ("middle", variants.middle),
        ("bottom", variants.bottom),
    ] {
        rows.push((
            name.into(),
            band,
            band_map(&pair, &op, &band, &dataset, modality, opts)?,
        ));
    }
    if let Some(spec) = &a.extend {
        for e in parse_grid(spec)? {
            let band = variants.middle.extended(e, 0)?;
            let map = band_map(&pair, &op, &band, &dataset, modality, opts)?;
            rows.push((format!("middle+top{e}"), band, map));
        }
    }

    let out = g.out(&a.out, "bands.csv");
    output::write_csv(
        &out,
        &["band", "start", "end", "map"],
        rows.iter().map(|(name, band, map)| {
            let r = band.retained();
            [
                name.clone(),
                r.start.to_string(),
                r.end.to_string(),
                num(*map),
            ]
        }),
    )?;
    let summary = json!({
        "dataset": dataset.name,
        "rank": op.rank(),
        "width": a.width,
        "baseline_map": baseline,
        "bands": rows.iter().map(|(name, band, map)| {
            let r = band.retained();
            json!({ "band": name, "start": r.start, "end": r.end, "map": map })
        }).collect::<Vec<_>>(),
        "csv": out,
    });
    output::write_json(&out.with_extension("json"), &summary)?;
    print(&summary)
}

#[cfg(test)]
mod tests {
    use super::parse_grid;

    #[test]
    fn grid_ranges_exclude_stop() {
        assert_eq!(
            parse_grid("0:400:50").unwrap(),
            vec![0, 50, 100, 150, 200, 250, 300, 350]
        );
        assert_eq!(parse_grid("2:5").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_grid("8").unwrap(), vec![8]);
        assert_eq!(parse_grid("4, 8,16").unwrap(), vec![4, 8, 16]);
    }

    #[test]
    fn bad_grids_are_rejected() {
        for spec in ["", "5:5:1", "0:10:0", "a:b:c", "1:2:3:4", "-1:4:1"] {
            assert!(parse_grid(spec).is_err(), "{spec}");
        }
    }
}
