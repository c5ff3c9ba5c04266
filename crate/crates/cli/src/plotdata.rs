//! CSV export from an existing report. Floats are printed with 17
//! significant digits and rows follow the report's own ordering, so the
//! files are byte-identical across runs.

use std::path::Path;

use serde_json::{Map, Value};

pub fn emit(out_dir: &Path, what: &str) -> Result<(), String> {
    let path = out_dir.join("report.json");
    let text =
        std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let report: Value =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let blocks = report
        .get("blocks")
        .and_then(Value::as_object)
        .ok_or("report has no blocks")?;
    match what {
        "torus" => torus(out_dir, blocks),
        "actions" => actions(out_dir, blocks),
        "deviation" => deviation(out_dir, blocks),
        other => Err(format!(
            "unknown plotdata target `{other}`; known: torus, actions, deviation"
        )),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), String> {
    let mut text = header.join(",") + "\n";
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn torus(out_dir: &Path, blocks: &Map<String, Value>) -> Result<(), String> {
    let chart = blocks
        .get("chart")
        .ok_or("no chart block in report; run `analyze` first")?;
    let seeds = chart
        .get("seeds")
        .and_then(Value::as_array)
        .ok_or("chart block carries no seeds")?;
    for (i, entry) in seeds.iter().enumerate() {
        let m = entry
            .get("seed")
            .and_then(Value::as_array)
            .map(|a| a.len())
            .ok_or("chart entry has no seed")?;
        let samples = entry
            .get("torus_samples")
            .and_then(Value::as_array)
            .ok_or("chart entry has no torus_samples")?;
        let rows: Vec<Vec<String>> = samples
            .iter()
            .map(|r| floats(r).iter().map(|&x| fmt(x)).collect())
            .collect();
        let width = rows.first().map(|r| r.len()).unwrap_or(m);
        let p = width.saturating_sub(m);
        let mut header: Vec<String> = (0..p).map(|j| format!("theta_{j}")).collect();
        header.extend((0..m).map(|a| format!("x_{a}")));
        write_csv(&out_dir.join(format!("torus_seed{i}.csv")), &header, &rows)?;
    }
    Ok(())
}

fn actions(out_dir: &Path, blocks: &Map<String, Value>) -> Result<(), String> {
    let acts = blocks
        .get("actions")
        .ok_or("no actions block in report; run `analyze` or `actions` first")?;
    let seeds = acts
        .get("seeds")
        .and_then(Value::as_array)
        .ok_or("actions block carries no seeds")?;
    let mut rows = Vec::new();
    let (mut q, mut p) = (0usize, 0usize);
    let push_row = |tag: String, levels: &[f64], mu: &[f64], rows: &mut Vec<Vec<String>>| {
        let mut row = vec![tag];
        row.extend(levels.iter().map(|&x| fmt(x)));
        row.extend(mu.iter().map(|&x| fmt(x)));
        rows.push(row);
    };
    for (i, entry) in seeds.iter().enumerate() {
        let levels = floats(entry.get("levels").unwrap_or(&Value::Null));
        let mu = floats(entry.get("mu").unwrap_or(&Value::Null));
        q = levels.len();
        p = mu.len();
        push_row(format!("seed{i}"), &levels, &mu, &mut rows);
    }
    if let Some(family) = acts.get("family") {
        let levels = &family["levels"];
        let samples = &family["samples"];
        push_row(
            "center".into(),
            &floats(&levels["center"]),
            &floats(&samples["center"]),
            &mut rows,
        );
        for side in ["minus", "plus"] {
            let lv = levels[side].as_array().cloned().unwrap_or_default();
            let mu = samples[side].as_array().cloned().unwrap_or_default();
            for (k, (l, m)) in lv.iter().zip(&mu).enumerate() {
                push_row(format!("{side}{k}"), &floats(l), &floats(m), &mut rows);
            }
        }
    }
    let mut header = vec!["torus".to_string()];
    header.extend((0..q).map(|j| format!("level_{j}")));
    header.extend((0..p).map(|j| format!("mu_{j}")));
    write_csv(&out_dir.join("actions.csv"), &header, &rows)
}

fn deviation(out_dir: &Path, blocks: &Map<String, Value>) -> Result<(), String> {
    let cons = blocks
        .get("conservation")
        .ok_or("no conservation block in report; run `conserve` first")?;
    let tensors = cons
        .get("tensors")
        .and_then(Value::as_array)
        .ok_or("conservation block carries no tensors")?;
    let mut wrote = false;
    for t in tensors {
        let label = t.get("label").and_then(Value::as_str).unwrap_or("tensor");
        let Some(dev) = t.get("deviation_grid").map(floats) else {
            continue;
        };
        if dev.is_empty() {
            continue;
        }
        let n = t.get("grid").and_then(Value::as_u64).unwrap_or(2).max(2) as usize;
        // Flat index runs with the last angle fastest; recover the digit
        // count from the sample total.
        let p = (dev.len() as f64).log(n as f64).round().max(1.0) as usize;
        let mut header: Vec<String> = (0..p).map(|j| format!("theta_{j}")).collect();
        header.push("deviation".into());
        let rows: Vec<Vec<String>> = dev
            .iter()
            .enumerate()
            .map(|(flat, &d)| {
                let mut digits = vec![0usize; p];
                let mut rest = flat;
                for j in (0..p).rev() {
                    digits[j] = rest % n;
                    rest /= n;
                }
                let mut row: Vec<String> =
                    digits.iter().map(|&t| fmt(t as f64 / n as f64)).collect();
                row.push(fmt(d));
                row
            })
            .collect();
        let safe: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        write_csv(&out_dir.join(format!("deviation_{safe}.csv")), &header, &rows)?;
        wrote = true;
    }
    if wrote {
        Ok(())
    } else {
        Err("no tensor in the report carries a deviation grid".into())
    }
}
