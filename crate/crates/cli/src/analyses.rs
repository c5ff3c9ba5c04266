//! Per-command analysis blocks: each builder returns a JSON value plus a
//! pass flag, recording analysis-level failures inside the block (so the
//! report is still written and the process exits with the tolerance code)
//! rather than aborting the run.

use nalgebra::DMatrix;
use serde_json::{json, Map, Value};

use liouville_core::action::{
    action_profile, assemble_normal_form, check_dimension_bound, coaffine_chart, isotropy_check,
    leafwise_action, mineur_action, mineur_family_samples, verify_action, NormalFormMode,
};
use liouville_core::conservation::{conservation_check, fourier_mode_bound, Hypothesis};
use liouville_core::expr::{fold_add, fold_mul, print_expr, Expr};
use liouville_core::geometry::{Structure, VectorFieldExpr};
use liouville_core::normalform::{
    birkhoff_normalize, pd_normalize, resonance_lattice, toric_degree, williamson_classify,
    real_toric_degree, BlockLabel, NormalForm, NormalizeMode,
};
use liouville_core::numberfield::{FieldElem, NumberField};
use liouville_core::series::FormalSeries;
use liouville_core::torus::{
    build_chart, build_chart_family, verify_quasiperiodicity, TorusChart,
};

use crate::config::AnalysisConfig;

pub struct BlockResult {
    pub value: Value,
    pub pass: bool,
}

fn fail(error: impl std::fmt::Display) -> BlockResult {
    BlockResult {
        value: json!({ "error": error.to_string(), "pass": false }),
        pass: false,
    }
}

fn vecf(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| json!(x)).collect())
}

fn matf(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| vecf(&(0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()))
            .collect(),
    )
}

/// Charts per seed, built once and shared by every block that needs them.
pub struct Charts {
    pub charts: Vec<TorusChart>,
}

pub fn build_charts(cfg: &AnalysisConfig) -> Result<Charts, String> {
    if cfg.seeds.is_empty() {
        return Err("no [seeds] point declared".into());
    }
    let sys = cfg.system.compile().map_err(|e| e.to_string())?;
    let mut charts = Vec::new();
    for seed in &cfg.seeds {
        charts.push(
            build_chart(&sys, seed, &cfg.tols)
                .map_err(|e| format!("seed {seed:?}: {e}"))?,
        );
    }
    Ok(Charts { charts })
}

// ---------------------------------------------------------------------------
// chart block

pub fn chart_block(cfg: &AnalysisConfig, charts: &Charts, warnings: &mut Vec<String>) -> BlockResult {
    let mut pass = true;
    let mut seeds_json = Vec::new();
    for (chart, seed) in charts.charts.iter().zip(&cfg.seeds) {
        let mut entry = Map::new();
        entry.insert("seed".into(), vecf(seed));
        entry.insert("levels".into(), vecf(&chart.levels));
        entry.insert("lattice".into(), matf(&chart.lattice));
        entry.insert(
            "validation".into(),
            json!({
                "max_commutator": chart.validation.max_commutator,
                "max_first_integral_residual": chart.validation.max_first_integral_residual,
                "frame_rank": chart.validation.frame_rank,
                "differential_rank": chart.validation.differential_rank,
            }),
        );

        let mut rotations = Vec::new();
        for weights in &cfg.chart.rotations {
            if weights.len() != chart.p() {
                return fail(format!(
                    "rotation weights {weights:?} need {} entries",
                    chart.p()
                ));
            }
            rotations.push(json!({
                "weights": vecf(weights),
                "vector": vecf(&chart.rotation_vector(weights)),
            }));
        }
        entry.insert("rotation".into(), Value::Array(rotations));

        let mut quasi = Vec::new();
        for (i, field) in cfg.system.fields.iter().enumerate() {
            match verify_quasiperiodicity(chart, field, 64) {
                Ok(rep) => {
                    if rep.residual > cfg.gates.quasiperiodicity {
                        pass = false;
                    }
                    quasi.push(json!({
                        "field": i,
                        "residual": rep.residual,
                        "mean_components": vecf(&rep.mean_components),
                    }));
                }
                Err(e) => return fail(format!("quasiperiodicity of field {i}: {e}")),
            }
        }
        entry.insert("quasiperiodicity".into(), Value::Array(quasi));

        if let Some(structure) = &cfg.system.structure {
            let bound = check_dimension_bound(
                cfg.system.p(),
                structure,
                seed,
                &cfg.system.basis,
            );
            entry.insert(
                "dimension_bound".into(),
                match &bound {
                    Ok(()) => json!({ "pass": true }),
                    Err(e) => json!({ "pass": false, "error": e.to_string() }),
                },
            );
            if bound.is_err() {
                pass = false;
            }
            let hams = cfg.system.hamiltonians.as_deref();
            match isotropy_check(chart, structure, hams, cfg.chart.isotropy_samples) {
                Ok(iso) => {
                    let ok = iso <= cfg.gates.isotropy;
                    if !ok {
                        pass = false;
                    }
                    entry.insert(
                        "isotropy".into(),
                        json!({
                            "samples": cfg.chart.isotropy_samples,
                            "max": iso,
                            "tol": cfg.gates.isotropy,
                            "pass": ok,
                        }),
                    );
                }
                Err(e) => return fail(format!("isotropy: {e}")),
            }
        } else {
            warnings.push("no structure declared: isotropy and dimension bound skipped".into());
        }

        match chart.sample_grid(cfg.chart.samples_grid) {
            Ok(samples) => {
                let rows: Vec<Value> = samples
                    .iter()
                    .map(|(theta, x)| {
                        let mut row = theta.clone();
                        row.extend_from_slice(x);
                        vecf(&row)
                    })
                    .collect();
                entry.insert("torus_samples".into(), Value::Array(rows));
            }
            Err(e) => return fail(format!("torus sampling: {e}")),
        }
        seeds_json.push(Value::Object(entry));
    }
    BlockResult {
        value: json!({ "seeds": seeds_json, "pass": pass }),
        pass,
    }
}

// ---------------------------------------------------------------------------
// actions block

fn nf_mode_of(name: &str) -> Result<NormalFormMode, String> {
    Ok(match name {
        "general" => NormalFormMode::General2Form,
        "almost_symplectic" => NormalFormMode::AlmostSymplectic,
        "symplectic" => NormalFormMode::Symplectic,
        "superintegrable" => NormalFormMode::Superintegrable,
        "poisson" => NormalFormMode::Poisson,
        other => {
            return Err(format!(
                "unknown normal_form mode `{other}`; known: general, almost_symplectic, symplectic, superintegrable, poisson"
            ))
        }
    })
}

pub fn actions_block(cfg: &AnalysisConfig, charts: &Charts, warnings: &mut Vec<String>) -> BlockResult {
    let Some(acts) = &cfg.actions else {
        return fail("no [actions] section in config");
    };
    let mut pass = true;
    let mut block = Map::new();
    block.insert(
        "alpha".into(),
        Value::Array(
            acts.alpha
                .iter()
                .map(|e| Value::String(print_expr(e, &cfg.coords)))
                .collect(),
        ),
    );

    let mut seeds_json = Vec::new();
    for chart in &charts.charts {
        let mut entry = Map::new();
        let mut mineur = Vec::new();
        for cycle in 0..chart.p() {
            match mineur_action(chart, &acts.alpha, cycle) {
                Ok(q) => mineur.push(json!({
                    "cycle": cycle,
                    "value": q.value,
                    "error_estimate": q.error_estimate,
                    "nodes": q.nodes,
                })),
                Err(e) => return fail(format!("mineur cycle {cycle}: {e}")),
            }
        }
        entry.insert("mineur".into(), Value::Array(mineur));
        match action_profile(chart, &acts.alpha) {
            Ok(profile) => {
                entry.insert("levels".into(), vecf(&profile.torus));
                entry.insert("mu".into(), vecf(&profile.mu));
                entry.insert("quadrature_errors".into(), vecf(&profile.quadrature_errors));
            }
            Err(e) => return fail(format!("action profile: {e}")),
        }
        seeds_json.push(Value::Object(entry));
    }
    block.insert("seeds".into(), Value::Array(seeds_json));

    let sys = charts.charts[0].system().clone();
    if !acts.family_directions.is_empty() {
        if acts.family_directions.len() != sys.q() {
            return fail(format!(
                "{} family directions, need one per integral ({})",
                acts.family_directions.len(),
                sys.q()
            ));
        }
        if let Some(d) = acts
            .family_directions
            .iter()
            .find(|d| d.len() != sys.dim)
        {
            return fail(format!(
                "family direction {d:?} has {} coordinates, need {}",
                d.len(),
                sys.dim
            ));
        }
        let family = match build_chart_family(
            &sys,
            &cfg.seeds[0],
            &acts.family_directions,
            acts.family_step,
            &cfg.tols,
        ) {
            Ok(f) => f,
            Err(e) => return fail(format!("chart family: {e}")),
        };
        let mut fam = Map::new();
        fam.insert(
            "directions".into(),
            Value::Array(acts.family_directions.iter().map(|d| vecf(d)).collect()),
        );
        fam.insert("step".into(), json!(acts.family_step));

        let samples = match mineur_family_samples(&family, &acts.alpha) {
            Ok(s) => s,
            Err(e) => return fail(format!("family actions: {e}")),
        };
        fam.insert(
            "samples".into(),
            json!({
                "center": vecf(&samples.center),
                "minus": Value::Array(samples.minus.iter().map(|v| vecf(v)).collect()),
                "plus": Value::Array(samples.plus.iter().map(|v| vecf(v)).collect()),
            }),
        );
        fam.insert(
            "levels".into(),
            json!({
                "center": vecf(&family.center.levels),
                "minus": Value::Array(family.minus.iter().map(|c| vecf(&c.levels)).collect()),
                "plus": Value::Array(family.plus.iter().map(|c| vecf(&c.levels)).collect()),
            }),
        );

        match &cfg.system.structure {
            Some(Structure::Form(omega)) => {
                match verify_action(&family, &samples, omega, acts.grid) {
                    Ok(rep) => {
                        if !rep.pass {
                            pass = false;
                        }
                        fam.insert(
                            "verify".into(),
                            json!({
                                "residuals": vecf(&rep.residuals),
                                "max_residual": rep.max_residual,
                                "pass": rep.pass,
                            }),
                        );
                        fam.insert("dmu_dz".into(), matf(&rep.dmu_dz));
                    }
                    Err(e) => return fail(format!("action verification: {e}")),
                }
            }
            _ => warnings.push("action verification needs a declared 2-form; skipped".into()),
        }

        if let Some(mode_name) = &acts.normal_form_mode {
            let mode = match nf_mode_of(mode_name) {
                Ok(m) => m,
                Err(e) => return fail(e),
            };
            let Some(structure) = &cfg.system.structure else {
                return fail("normal_form requested but no structure declared");
            };
            match assemble_normal_form(&family, structure, mode, acts.grid) {
                Ok(rep) => {
                    let gated = mode == NormalFormMode::Symplectic;
                    let ok = !gated || rep.residual <= cfg.gates.nf_residual;
                    if !ok {
                        pass = false;
                    }
                    fam.insert(
                        "normal_form".into(),
                        json!({
                            "mode": mode_name,
                            "isotropy": rep.isotropy,
                            "action_angle_block": matf(&rep.action_angle_block),
                            "action_angle_spread": rep.action_angle_spread,
                            "magnetic": matf(&rep.magnetic),
                            "magnetic_spread": rep.magnetic_spread,
                            "magnetic_closedness_defect": rep.magnetic_closedness_defect,
                            "residual": rep.residual,
                            "residual_tol": cfg.gates.nf_residual,
                            "transverse_rank": rep.transverse_rank,
                            "overdetermination": rep.overdetermination,
                            "pass": ok,
                        }),
                    );
                }
                Err(e) => return fail(format!("normal form assembly: {e}")),
            }
        }
        block.insert("family".into(), Value::Object(fam));
    } else if acts.normal_form_mode.is_some() {
        return fail("normal_form needs at least one family_direction");
    }

    if let Some(cycle) = acts.leafwise_cycle {
        if charts.charts.len() < 2 {
            warnings.push("leafwise actions need at least two seeds; skipped".into());
        } else {
            let hams = cfg
                .system
                .hamiltonians
                .clone()
                .unwrap_or_else(|| cfg.system.integrals.clone());
            match leafwise_action(&charts.charts, &hams, cycle, &cfg.tols) {
                Ok(rep) => {
                    block.insert(
                        "leafwise".into(),
                        json!({
                            "cycle": cycle,
                            "mu": vecf(&rep.mu),
                            "quadrature_error": rep.quadrature_error,
                            "path_consistency": rep.path_consistency,
                        }),
                    );
                }
                Err(e) => return fail(format!("leafwise actions: {e}")),
            }
        }
    }

    if let Some(base_dim) = acts.coaffine_base_dim {
        if charts.charts.len() < 2 {
            warnings.push("co-affine rank needs at least two seeds; skipped".into());
        } else {
            let mut mu_rows = Vec::new();
            for chart in &charts.charts {
                match action_profile(chart, &acts.alpha) {
                    Ok(p) => mu_rows.push(p.mu),
                    Err(e) => return fail(format!("co-affine actions: {e}")),
                }
            }
            match coaffine_chart(&mu_rows, base_dim) {
                Ok(co) => {
                    block.insert(
                        "coaffine".into(),
                        json!({
                            "base_dim": co.base_dim,
                            "rank": co.rank,
                            "overdetermination": co.overdetermination,
                            "mu": Value::Array(co.mu.iter().map(|v| vecf(v)).collect()),
                        }),
                    );
                }
                Err(e) => return fail(format!("co-affine chart: {e}")),
            }
        }
    }

    block.insert("pass".into(), json!(pass));
    BlockResult {
        value: Value::Object(block),
        pass,
    }
}

// ---------------------------------------------------------------------------
// conservation block

pub fn conservation_block(cfg: &AnalysisConfig, charts: &Charts) -> BlockResult {
    let Some(cons) = &cfg.conservation else {
        return fail("no [conservation] section in config");
    };
    let chart = &charts.charts[0];
    let hypothesis = match &cons.combination {
        None => Hypothesis::AllFields,
        Some(weights) => {
            if weights.len() != cfg.system.fields.len() {
                return fail(format!(
                    "combination has {} weights, need {}",
                    weights.len(),
                    cfg.system.fields.len()
                ));
            }
            let dim = cfg.system.dim;
            let comps: Vec<Expr> = (0..dim)
                .map(|a| {
                    cfg.system
                        .fields
                        .iter()
                        .zip(weights)
                        .map(|(f, w)| fold_mul(w.clone(), f.components()[a].clone()))
                        .reduce(fold_add)
                        .expect("at least one field")
                })
                .collect();
            Hypothesis::IrrationalGenerator(VectorFieldExpr::new(comps))
        }
    };

    let mut pass = true;
    let mut tensors_json = Vec::new();
    for decl in &cons.tensors {
        match conservation_check(&decl.label, &decl.tensor, chart, hypothesis.clone(), cons.grid) {
            Ok(rep) => {
                if !rep.pass {
                    pass = false;
                }
                let modes = fourier_mode_bound(&rep.averaged);
                let deviation_grid: Vec<f64> = rep
                    .averaged
                    .samples
                    .iter()
                    .map(|s| {
                        s.iter()
                            .zip(&rep.averaged.average)
                            .fold(0.0f64, |acc, (v, a)| acc.max((v - a).abs()))
                    })
                    .collect();
                tensors_json.push(json!({
                    "label": decl.label,
                    "pass": rep.pass,
                    "deviation": rep.averaged.deviation,
                    "tol": rep.tol,
                    "hypothesis_residual": rep.hypothesis_residual,
                    "max_nonconstant_mode": modes.max_nonzero_mode,
                    "grid": rep.averaged.grid,
                    "average": vecf(&rep.averaged.average),
                    "deviation_grid": vecf(&deviation_grid),
                    "rationality_probe": rep.rationality.as_ref().map(|r| json!({
                        "rotation": vecf(&r.rotation),
                        "resonant": r.resonant,
                    })),
                }));
            }
            Err(e) => {
                pass = false;
                tensors_json.push(json!({
                    "label": decl.label,
                    "pass": false,
                    "error": e.to_string(),
                }));
            }
        }
    }

    let mut rejects_json = Vec::new();
    for decl in &cons.rejects {
        match conservation_check(&decl.label, &decl.tensor, chart, hypothesis.clone(), cons.grid) {
            Err(e) => rejects_json.push(json!({
                "label": decl.label,
                "refused": true,
                "error": e.to_string(),
            })),
            Ok(rep) => {
                pass = false;
                rejects_json.push(json!({
                    "label": decl.label,
                    "refused": false,
                    "deviation": rep.averaged.deviation,
                }));
            }
        }
    }

    BlockResult {
        value: json!({
            "grid": cons.grid,
            "hypothesis": match &cons.combination {
                None => "all-fields".to_string(),
                Some(w) => format!(
                    "combination [{}]",
                    w.iter().map(|e| print_expr(e, &cfg.coords)).collect::<Vec<_>>().join(", ")
                ),
            },
            "tensors": tensors_json,
            "rejected": rejects_json,
            "pass": pass,
        }),
        pass,
    }
}

// ---------------------------------------------------------------------------
// normalform block

fn series_texts(nf: &[FormalSeries], field: &NumberField) -> Vec<String> {
    nf.iter().map(|s| s.to_text(field)).collect()
}

fn gamma_json(gamma: &[FieldElem], field: &NumberField) -> Value {
    Value::Array(
        gamma
            .iter()
            .map(|g| Value::String(field.format(g)))
            .collect(),
    )
}

fn toric_json(field: &NumberField, gamma: &[FieldElem]) -> Value {
    let t = toric_degree(field, gamma);
    // Exact reconstruction γ_i = Σ_s λ_s·Z_s[i] must close; surface it in
    // the report so consumers need not trust it blindly.
    let mut exact = true;
    for (i, g) in gamma.iter().enumerate() {
        let mut sum = field.zero();
        for (lam, z) in t.lambdas.iter().zip(&t.generators) {
            let zi = num_rational::BigRational::from_integer(z[i].clone());
            sum = field.add(&sum, &field.scale(&zi, lam));
        }
        if &sum != g {
            exact = false;
        }
    }
    json!({
        "degree": t.degree,
        "generators": t.generators
            .iter()
            .map(|row| Value::Array(row.iter().map(|z| Value::String(z.to_string())).collect()))
            .collect::<Vec<_>>(),
        "lambdas": t.lambdas
            .iter()
            .map(|l| Value::String(field.format(l)))
            .collect::<Vec<_>>(),
        "reconstruction_exact": exact,
    })
}

pub fn normalform_block(cfg: &AnalysisConfig, maxdeg_flag: Option<usize>, warnings: &mut Vec<String>) -> BlockResult {
    let Some(nf_cfg) = &cfg.normalform else {
        return fail("no [normalform] section in config");
    };
    let maxdeg = maxdeg_flag.unwrap_or(nf_cfg.maxdeg);
    let resonance_maxdeg = nf_cfg.resonance_maxdeg.unwrap_or(maxdeg);
    let mut block = Map::new();
    block.insert("mode".into(), json!(nf_cfg.mode));
    block.insert("maxdeg".into(), json!(maxdeg));

    let normalized: Option<NormalForm> = if nf_cfg.series.is_empty() {
        None
    } else {
        let outcome = match nf_cfg.mode.as_str() {
            "vectorfield" => pd_normalize(&nf_cfg.field, &nf_cfg.series, maxdeg),
            "hamiltonian" => {
                if nf_cfg.vars % 2 != 0 {
                    return fail("hamiltonian mode needs an even number of variables");
                }
                birkhoff_normalize(&nf_cfg.field, &nf_cfg.series[0], nf_cfg.vars / 2, maxdeg)
            }
            other => return fail(format!("unknown mode `{other}`; known: vectorfield, hamiltonian")),
        };
        match outcome {
            Ok(nf) => Some(nf),
            Err(e) => return fail(format!("normalization: {e}")),
        }
    };

    let (field, gamma) = match &normalized {
        Some(nf) => (nf.field.clone(), nf.gamma.clone()),
        None => {
            if nf_cfg.gamma_texts.is_empty() {
                return fail("normalform needs `term` lines or a `gamma` list");
            }
            let mut gamma = Vec::new();
            for text in &nf_cfg.gamma_texts {
                match nf_cfg.field.parse(text) {
                    Ok(g) => gamma.push(g),
                    Err(e) => return fail(format!("gamma `{text}`: {e}")),
                }
            }
            (nf_cfg.field.clone(), gamma)
        }
    };

    if let Some(nf) = &normalized {
        block.insert("input".into(), json!(series_texts(&nf.working_input, &field)));
        block.insert("result".into(), json!(series_texts(&nf.result, &field)));
        block.insert(
            "actions_polynomial".into(),
            match &nf.actions_polynomial {
                Some(p) => json!(p.to_text(&field)),
                None => Value::Null,
            },
        );
        block.insert(
            "generator_log".into(),
            Value::Array(
                nf.log
                    .iter()
                    .map(|step| {
                        json!({
                            "degree": step.degree,
                            "series": series_texts(&step.generator, &field),
                        })
                    })
                    .collect(),
            ),
        );
        block.insert(
            "nilpotent_obstruction".into(),
            json!(nf.nilpotent_obstruction),
        );
        if nf.nilpotent_obstruction {
            warnings.push(
                "nilpotent linear part: the normalized field commutes with the semisimple part only"
                    .into(),
            );
        }
        if nf.mode == NormalizeMode::Hamiltonian && nf.actions_polynomial.is_none() {
            warnings.push("resonant monomials survive: no polynomial in the actions alone".into());
        }
    }
    block.insert("field".into(), json!(field.names()));
    block.insert("gamma".into(), gamma_json(&gamma, &field));

    match resonance_lattice(&field, &gamma, resonance_maxdeg) {
        Ok(data) => {
            block.insert(
                "resonance".into(),
                json!({
                    "maxdeg": data.maxdeg,
                    "kernel": data.kernel
                        .iter()
                        .map(|row| Value::Array(
                            row.iter().map(|z| Value::String(z.to_string())).collect(),
                        ))
                        .collect::<Vec<_>>(),
                    "resonant": data.resonant
                        .iter()
                        .map(|per_j| Value::Array(
                            per_j
                                .iter()
                                .map(|k| Value::String(
                                    k.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
                                ))
                                .collect(),
                        ))
                        .collect::<Vec<_>>(),
                }),
            );
            block.insert("toric".into(), toric_json(&field, &gamma));
        }
        Err(e) => return fail(format!("resonance lattice: {e}")),
    }

    block.insert("pass".into(), json!(true));
    BlockResult {
        value: Value::Object(block),
        pass: true,
    }
}

// ---------------------------------------------------------------------------
// classify block

pub fn classify_block(cfg: &AnalysisConfig) -> BlockResult {
    let Some(cls) = &cfg.classify else {
        return fail("no [classify] section in config");
    };
    let mut block = Map::new();
    if let Some(h2) = &cls.hamiltonian {
        let rationals = NumberField::rationals();
        match williamson_classify(&rationals, h2) {
            Ok(w) => {
                block.insert(
                    "williamson".into(),
                    json!({
                        "elliptic": w.elliptic,
                        "hyperbolic": w.hyperbolic,
                        "focus": w.focus,
                        "real_toric_degree": real_toric_degree(&w),
                        "blocks": w.blocks
                            .iter()
                            .map(|b| json!({
                                "label": match b.label {
                                    BlockLabel::Elliptic => "elliptic",
                                    BlockLabel::Hyperbolic => "hyperbolic",
                                    BlockLabel::FocusFocus => "focus-focus",
                                },
                                "squared_eigenvalue": b.squared_eigenvalue
                                    .as_ref()
                                    .map(|u| u.to_string()),
                                "factor": b.factor,
                            }))
                            .collect::<Vec<_>>(),
                    }),
                );
            }
            Err(e) => return fail(format!("classification: {e}")),
        }
    }
    if !cls.gamma_texts.is_empty() {
        let mut gamma = Vec::new();
        for text in &cls.gamma_texts {
            match cls.field.parse(text) {
                Ok(g) => gamma.push(g),
                Err(e) => return fail(format!("gamma `{text}`: {e}")),
            }
        }
        block.insert("toric".into(), toric_json(&cls.field, &gamma));
    }
    if block.is_empty() {
        return fail("classify needs `term` lines or a `gamma` list");
    }
    block.insert("pass".into(), json!(true));
    BlockResult {
        value: Value::Object(block),
        pass: true,
    }
}
