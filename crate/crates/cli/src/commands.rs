use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tmeseg_core::aggregator::{aggregate, AggregationResult, NucleusProvenance};
use tmeseg_core::counting::{calibrate, CalibrationPair, CalibrationTable, CountRecord};
use tmeseg_core::io::{self, role, Dtype, StackContainer};
use tmeseg_core::metrics::{evaluate_instances, evaluate_semantic, EvaluationReport, REPORT_SCHEMA_VERSION};
use tmeseg_core::postprocess::{assign_panoptic, force_mode, AdmissiblePartition, StudentLogits};
use tmeseg_core::raster::{InstanceMap, LabelRaster};
use tmeseg_core::synth::{reference_aggregate, Scene, SceneParams};
use tmeseg_core::tiling::{aggregate_tiled, downscale2, worker_pool};
use tmeseg_core::tme::{association_table, slide_metrics, AssociationRow, CaseManifestEntry, CaseRecord, SlideMetrics};
use tmeseg_core::{ClassId, ClassMap, RunConfig, Taxonomy};

use crate::args::{
    AggregateArgs, Cli, Command, CountArgs, DecodeMode, EvaluateArgs, InfoArgs, PostprocessArgs, ReportFormat,
    SynthArgs, TmeCohortArgs, TmeCommand, TmeSlideArgs,
};
use crate::provenance::{FileDigest, Provenance};

/// Misuse of flags detected after parsing; exits like a parse error.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

struct Ctx {
    cfg: RunConfig,
    tax: Taxonomy,
    prov: Provenance,
}

impl Ctx {
    /// Records the file's digest and hands the path back.
    fn input<'a>(&mut self, role: &str, path: &'a Path) -> Result<&'a Path> {
        self.prov.inputs.push(FileDigest::of(role, path)?);
        Ok(path)
    }

    fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.prov.outputs.push(FileDigest::of(role, path)?);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, role: &str, path: &Path, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
        self.output(role, path)
    }

    fn save(&mut self, role: &str, path: &Path, containers: &[StackContainer]) -> Result<()> {
        io::save_containers(containers, path)?;
        self.output(role, path)
    }

    fn class(&self, name: &str) -> Result<ClassId> {
        Ok(self.tax.resolve(name)?)
    }

    fn class_name(&self, c: ClassId) -> String {
        self.tax.name_of(c).map_or_else(|| c.name(), str::to_owned)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    // the config enters the record through its canonical form, not its bytes
    let cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let tax_path = cli.taxonomy.clone().or_else(|| cfg.path("taxonomy").map(Path::to_path_buf));
    let tax = match &tax_path {
        Some(p) => Taxonomy::from_path(p).with_context(|| format!("loading taxonomy {}", p.display()))?,
        None => Taxonomy::builtin().clone(),
    };
    let mut prov = Provenance::new(cli.command.name(), cli.command.params(), &cfg.to_json(), &tax.to_json());
    prov.workers = cli.workers;
    let mut ctx = Ctx { cfg, tax, prov };

    let pool = worker_pool(cli.workers)?;
    let outcome = pool.install(|| dispatch(&mut ctx, &cli.command));
    if let Err(e) = &outcome {
        if e.downcast_ref::<Usage>().is_some() {
            return outcome;
        }
        ctx.prov.status = "error";
        ctx.prov.error = Some(format!("{e:#}"));
    }
    ctx.prov.seal();
    ctx.prov.emit(cli.provenance.as_deref())?;
    outcome
}

fn dispatch(ctx: &mut Ctx, command: &Command) -> Result<()> {
    match command {
        Command::Aggregate(a) => cmd_aggregate(ctx, a),
        Command::Postprocess(a) => cmd_postprocess(ctx, a),
        Command::Evaluate(a) => cmd_evaluate(ctx, a),
        Command::Count(a) => cmd_count(ctx, a),
        Command::Tme(TmeCommand::Slide(a)) => cmd_tme_slide(ctx, a),
        Command::Tme(TmeCommand::Cohort(a)) => cmd_tme_cohort(ctx, a),
        Command::Synth(a) => cmd_synth(ctx, a),
        Command::Info(a) => cmd_info(ctx, a),
    }
}

/// The container with `role`, or the only container in the file.
fn pick<'a>(all: &'a [StackContainer], role: &str) -> Option<&'a StackContainer> {
    match all.iter().find(|c| c.role() == Some(role)) {
        Some(c) => Some(c),
        None if all.len() == 1 && all[0].role().is_none() => Some(&all[0]),
        None => None,
    }
}

#[derive(Serialize)]
struct AggregateSummary {
    width: usize,
    height: usize,
    background_threshold: u8,
    nuclei: usize,
    undefined: usize,
    mitotic: usize,
    mitosis_regions: u32,
}

#[derive(Serialize)]
struct AggregateDetails<'a> {
    schema_version: u32,
    background_threshold: u8,
    nuclei: &'a BTreeMap<u32, NucleusProvenance>,
}

fn cmd_aggregate(ctx: &mut Ctx, a: &AggregateArgs) -> Result<()> {
    let path = ctx.input("bundle", &a.bundle)?;
    let (mut bundle, mut mpp) = io::load_bundle(path, &ctx.tax)?;
    if let Some(m) = a.mpp {
        if !m.is_finite() || m <= 0.0 {
            return Err(usage(format!("--mpp must be positive, got {m}")));
        }
        mpp = Some(m);
    }
    if a.downscale2 || ctx.cfg.downscale2 {
        bundle = downscale2(&bundle)?;
        mpp = mpp.map(|m| m * 2.0);
    }
    let cfg = ctx.cfg.aggregator();
    let result: AggregationResult = if a.tiled || ctx.cfg.tiling.is_some() {
        aggregate_tiled(&bundle, &ctx.tax, &cfg, &ctx.cfg.tiling.unwrap_or_default())?
    } else {
        aggregate(&bundle, &ctx.tax, &cfg)?
    };
    ctx.save("mask", &a.out, &io::result_to_containers(&result, &ctx.tax, mpp))?;
    if let Some(p) = &a.details {
        let details = AggregateDetails {
            schema_version: REPORT_SCHEMA_VERSION,
            background_threshold: result.background_threshold,
            nuclei: &result.provenance,
        };
        ctx.write_json("details", p, &details)?;
    }
    let classes: Vec<Option<ClassId>> = result.instances.attrs().values().map(|r| r.class).collect();
    let summary = AggregateSummary {
        width: result.semantic.width(),
        height: result.semantic.height(),
        background_threshold: result.background_threshold,
        nuclei: classes.len(),
        undefined: classes.iter().filter(|c| c.is_none()).count(),
        mitotic: classes.iter().filter(|&&c| c == Some(ClassId::MITOTIC_CELL)).count(),
        mitosis_regions: result.mitosis.region_count,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_postprocess(ctx: &mut Ctx, a: &PostprocessArgs) -> Result<()> {
    let all = io::load_containers(ctx.input("logits", &a.logits)?)?;
    let c = pick(&all, role::STUDENT_LOGITS).context("no `student_logits` container")?;
    let student = StudentLogits::new(c.to_logits(&ctx.tax)?, &ctx.tax)?;
    let mpp = c.header.mpp;
    let mut out = Vec::new();
    match a.mode {
        DecodeMode::Force => {
            if a.nuclei.is_some() || a.partition.is_some() {
                return Err(usage("--nuclei and --partition only apply to --mode panoptic"));
            }
            out.push(StackContainer::from_labels(&force_mode(&student)));
        }
        DecodeMode::Panoptic => {
            let nuclei_path = a.nuclei.as_deref().ok_or_else(|| usage("--mode panoptic needs --nuclei"))?;
            let mut nuclei = io::load_instances(ctx.input("nuclei", nuclei_path)?, &ctx.tax)?;
            let partition_path = a.partition.clone().or_else(|| ctx.cfg.path("partition").map(Path::to_path_buf));
            let partition = match &partition_path {
                Some(p) => {
                    let p = ctx.input("partition", p)?;
                    let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                    let part: AdmissiblePartition = serde_json::from_str(&text)?;
                    part.validate(&ctx.tax)?;
                    part
                }
                None => AdmissiblePartition::default(),
            };
            let assigned = assign_panoptic(&student, &nuclei, &partition)?;
            for (id, attrs) in nuclei.attrs_mut() {
                attrs.class = assigned.nucleus_classes.get(id).copied();
            }
            out.push(StackContainer::from_labels(&assigned.labels));
            let mut n = StackContainer::from_instances(&nuclei, &ctx.tax);
            n.header.role = Some(role::NUCLEI.to_owned());
            out.push(n);
        }
    }
    out[0].header.role = Some(role::LABELS.to_owned());
    out[0].header.mpp = mpp;
    ctx.save("labels", &a.out, &out)
}

fn cmd_evaluate(ctx: &mut Ctx, a: &EvaluateArgs) -> Result<()> {
    let gt_all = io::load_containers(ctx.input("gt", &a.gt)?)?;
    let (pred, _) = io::load_labels(ctx.input("pred", &a.pred)?, &ctx.tax)?;
    let map_path = a.map.clone().or_else(|| ctx.cfg.path("class_map").map(Path::to_path_buf));
    let map = match &map_path {
        Some(p) => ClassMap::from_path(ctx.input("class_map", p)?, &ctx.tax)?,
        None => ClassMap::identity(&ctx.tax),
    };
    let of_dtype = |d: Dtype| (gt_all.len() == 1 && gt_all[0].role().is_none() && gt_all[0].header.dtype == d).then(|| &gt_all[0]);
    let gt_nuclei = gt_all.iter().find(|c| c.role() == Some(role::NUCLEI)).or_else(|| of_dtype(Dtype::U32));
    let gt_labels = gt_all.iter().find(|c| c.role() == Some(role::LABELS)).or_else(|| of_dtype(Dtype::U8));
    if gt_nuclei.is_none() && gt_labels.is_none() {
        bail!("ground truth holds neither nucleus instances nor a label raster");
    }
    let mut report = EvaluationReport { schema_version: REPORT_SCHEMA_VERSION, ..Default::default() };
    if let Some(c) = gt_nuclei {
        report.instances = Some(evaluate_instances(&c.to_instances(&ctx.tax)?, &pred, &map, &ctx.tax)?);
    }
    if let Some(c) = gt_labels {
        let classes = if a.classes.is_empty() {
            ctx.tax.ids().collect()
        } else {
            a.classes.iter().map(|n| ctx.class(n)).collect::<Result<Vec<_>>>()?
        };
        report.semantic = Some(evaluate_semantic(&c.to_labels(&ctx.tax)?, &pred, &classes, &ctx.tax)?);
    }
    match a.format {
        ReportFormat::Table => print!("{}", report.to_table()),
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(p) = &a.out {
        ctx.write_json("report", p, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CountRow {
    class: String,
    pixel_area: u64,
    component_count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_area_per_cell: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimated_count: Option<f64>,
}

#[derive(Serialize)]
struct CountReport {
    schema_version: u32,
    counts: Vec<CountRow>,
}

fn cmd_count(ctx: &mut Ctx, a: &CountArgs) -> Result<()> {
    if let Some(fit) = &a.fit {
        return fit_calibration(ctx, a, fit);
    }
    let mask_path = a.mask.as_deref().expect("clap requires --mask without --fit");
    let (mask, _) = io::load_labels(ctx.input("mask", mask_path)?, &ctx.tax)?;
    let classes: Vec<ClassId> = if a.classes.is_empty() {
        ctx.tax.ids().filter(|&c| c != ClassId::BACKGROUND).collect()
    } else {
        a.classes.iter().map(|n| ctx.class(n)).collect::<Result<_>>()?
    };
    // the config's calibration table applies only when a dataset is named
    let table_path = match (&a.calibration, &a.dataset) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(_)) => ctx.cfg.path("calibration").map(Path::to_path_buf),
        (None, None) => None,
    };
    let table = match &table_path {
        Some(p) => Some(CalibrationTable::from_path(ctx.input("calibration", p)?)?),
        None => None,
    };
    let mut counts = Vec::new();
    for c in classes {
        let name = ctx.class_name(c);
        let mean_area = match (&table, a.mean_area) {
            (Some(t), _) => {
                let dataset = a.dataset.as_deref().unwrap_or_default();
                Some(t.get(dataset, &name).with_context(|| format!("no calibration for `{name}` in dataset `{dataset}`"))?.slope)
            }
            (None, m) => m,
        };
        if let Some(m) = mean_area {
            if !m.is_finite() || m <= 0.0 {
                bail!("mean area per cell must be positive, got {m}");
            }
        }
        let record = CountRecord::measure(&mask, c, mean_area);
        counts.push(CountRow {
            class: name,
            pixel_area: record.pixel_area,
            component_count: record.component_count,
            mean_area_per_cell: record.mean_area_per_cell,
            estimated_count: record.estimated_count(),
        });
    }
    let report = CountReport { schema_version: REPORT_SCHEMA_VERSION, counts };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &a.out {
        ctx.write_json("counts", p, &report)?;
    }
    Ok(())
}

fn fit_calibration(ctx: &mut Ctx, a: &CountArgs, fit: &Path) -> Result<()> {
    let [class] = a.classes.as_slice() else {
        return Err(usage("--fit needs exactly one --class"));
    };
    let class = ctx.class_name(ctx.class(class)?);
    let dataset = a.dataset.as_deref().expect("clap requires --dataset with --fit");
    let out = a.out.as_deref().expect("clap requires --out with --fit");
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(ctx.input("pairs", fit)?)?;
    let pairs = rdr.deserialize::<CalibrationPair>().collect::<std::result::Result<Vec<_>, _>>()?;
    let cal = calibrate(&pairs)?;
    let mut table = if out.exists() {
        CalibrationTable::from_path(ctx.input("calibration", out)?)?
    } else {
        CalibrationTable::new()
    };
    table.insert(dataset, &class, cal);
    println!("{}", serde_json::to_string_pretty(&cal)?);
    ctx.write_json("calibration", out, &table)
}

fn margin(ctx: &Ctx, flag: Option<f64>) -> Result<f64> {
    let m = flag.unwrap_or(ctx.cfg.margin_um);
    if !m.is_finite() || m <= 0.0 {
        return Err(usage(format!("--margin-um must be positive, got {m}")));
    }
    Ok(m)
}

fn cmd_tme_slide(ctx: &mut Ctx, a: &TmeSlideArgs) -> Result<()> {
    let margin_um = margin(ctx, a.margin_um)?;
    let (mask, header_mpp) = io::load_labels(ctx.input("mask", &a.mask)?, &ctx.tax)?;
    let mpp = a.mpp.or(header_mpp).context("the mask records no mpp; pass --mpp")?;
    let m: SlideMetrics = slide_metrics(&mask, mpp, margin_um)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    if let Some(p) = &a.out {
        ctx.write_json("metrics", p, &m)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CohortReport {
    schema_version: u32,
    margin_um: f64,
    cases: Vec<CaseRecord>,
    associations: Vec<AssociationRow>,
}

fn cmd_tme_cohort(ctx: &mut Ctx, a: &TmeCohortArgs) -> Result<()> {
    let margin_um = margin(ctx, a.margin_um)?;
    let entries = CaseManifestEntry::load_manifest(ctx.input("manifest", &a.manifest)?)?;
    let genes: Vec<String> = if a.genes.is_empty() {
        entries.iter().flat_map(|e| e.genes.keys().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        a.genes.clone()
    };
    let mut cases = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut slides = Vec::with_capacity(e.slides.len());
        for s in &e.slides {
            let (mask, _) = io::load_labels(ctx.input("slide", s)?, &ctx.tax)
                .with_context(|| format!("case `{}`, slide {}", e.case_id, s.display()))?;
            slides.push(slide_metrics(&mask, e.mpp, margin_um)?);
        }
        cases.push(CaseRecord::from_slides(&e.case_id, &slides, e.genes.clone()));
    }
    let associations = association_table(&cases, &genes)?;
    let mut csv = String::from(AssociationRow::CSV_HEADER);
    csv.push('\n');
    for r in &associations {
        csv.push_str(&r.to_csv_line());
        csv.push('\n');
    }
    std::fs::write(&a.out_csv, csv).with_context(|| format!("cannot write {}", a.out_csv.display()))?;
    ctx.output("associations_csv", &a.out_csv)?;
    let tested = associations.iter().filter(|r| r.p_value.is_some()).count();
    let report = CohortReport { schema_version: REPORT_SCHEMA_VERSION, margin_um, cases, associations };
    ctx.write_json("cohort", &a.out_json, &report)?;
    println!("{} cases, {} genes, {} tested associations", report.cases.len(), genes.len(), tested);
    Ok(())
}

fn cmd_synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    let params = SceneParams {
        min_size: a.min_size,
        max_size: a.max_size,
        max_nuclei: a.max_nuclei,
        max_candidates: a.max_candidates,
    };
    if params.min_size == 0 || params.min_size > params.max_size {
        return Err(usage("need 0 < --min-size <= --max-size"));
    }
    let bundle = Scene::random(a.seed, &params).render()?;
    ctx.save("bundle", &a.out, &io::bundle_to_containers(&bundle, &ctx.tax, a.mpp))?;
    if let Some(p) = &a.expected {
        let r = reference_aggregate(&bundle, &ctx.tax, &ctx.cfg.aggregator())?;
        let mut nuclei: InstanceMap = bundle.nuclei.clone();
        for (id, attrs) in nuclei.attrs_mut() {
            attrs.class = r.nucleus_classes.get(id).copied().flatten();
        }
        let semantic: LabelRaster = r.semantic;
        let mut labels = StackContainer::from_labels(&semantic);
        labels.header.role = Some(role::LABELS.to_owned());
        labels.header.mpp = a.mpp;
        let mut n = StackContainer::from_instances(&nuclei, &ctx.tax);
        n.header.role = Some(role::NUCLEI.to_owned());
        ctx.save("expected", p, &[labels, n])?;
    }
    let (w, h) = bundle.dims();
    println!("{w}x{h}, {} nuclei, {} candidates", bundle.nuclei.len(), bundle.candidates.len());
    Ok(())
}

#[derive(Serialize)]
struct ContainerInfo<'a> {
    role: Option<&'a str>,
    width: usize,
    height: usize,
    dtype: Dtype,
    channels: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    mpp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    halo: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<usize>,
}

fn cmd_info(ctx: &mut Ctx, a: &InfoArgs) -> Result<()> {
    let path: PathBuf = ctx.input("file", &a.file)?.to_path_buf();
    let all = io::load_containers(&path)?;
    let infos: Vec<ContainerInfo> = all
        .iter()
        .map(|c| ContainerInfo {
            role: c.role(),
            width: c.header.width,
            height: c.header.height,
            dtype: c.header.dtype,
            channels: &c.header.channels,
            mpp: c.header.mpp,
            halo: c.header.halo,
            instances: c.header.instances.as_ref().map(Vec::len),
            candidates: c.header.candidates.as_ref().map(Vec::len),
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&infos)?);
    Ok(())
}
