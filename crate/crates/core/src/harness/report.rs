use std::fmt::Write;

use super::{ExperimentConfig, RunManifest};
use crate::acquisition::AblationConfig;
use crate::metrics::{bland_altman, mean_sd, MetricsReport};

pub const NO_RESULTS: &str = "No results: run `nihc evaluate` first.";

fn select<'a>(reports: &'a [MetricsReport], condition: &str, ablation: &str) -> Vec<&'a MetricsReport> {
    reports.iter().filter(|r| r.condition == condition && r.ablation == ablation).collect()
}

fn stat(rows: &[&MetricsReport], column: &str) -> String {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.column(column)).filter(|v| v.is_finite()).collect();
    if v.is_empty() {
        return "n/a".into();
    }
    let (m, s) = mean_sd(&v);
    format!("{m:.3} ± {s:.3}")
}

fn table(out: &mut String, header: &[&str], rows: Vec<Vec<String>>) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn accuracy_rows(reports: &[MetricsReport], keys: &[(&str, &str)]) -> Vec<Vec<String>> {
    let cols = ["p2s_mean", "p2s_ref", "dice_lvm", "dice_rvm", "ed_mean", "chamfer_sym"];
    keys.iter()
        .filter_map(|&(c, a)| {
            let rows = select(reports, c, a);
            if rows.is_empty() {
                return None;
            }
            let mut line = vec![c.to_string(), a.to_string(), rows.len().to_string()];
            line.extend(cols.iter().map(|col| stat(&rows, col)));
            Some(line)
        })
        .collect()
}

const ACCURACY_HEADER: [&str; 9] =
    ["condition", "slices", "cases", "p2s (mm)", "p2s of truth (mm)", "Dice LVM", "Dice RVM", "ED (mm)", "Chamfer (mm)"];

/// Markdown summary of an evaluated run. Depends only on its inputs, so the
/// same CSVs and manifests always give the same bytes.
pub fn render_report(reports: &[MetricsReport], manifests: &[RunManifest], config: &ExperimentConfig) -> String {
    let mut out = String::from("# Reconstruction report\n\n");
    if reports.is_empty() {
        out.push_str(NO_RESULTS);
        out.push('\n');
        return out;
    }
    let _ = writeln!(out, "Configuration hash: `{}`\n", config.hash());

    out.push_str("## Surface fit on ideal slices\n\n");
    out.push_str("Mean distance from input contour points to the reconstructed surface (p2s), ");
    out.push_str("next to the same distance for the generating surface.\n\n");
    table(&mut out, &ACCURACY_HEADER, accuracy_rows(reports, &[("ideal", "full")]));

    out.push_str("## Ideal vs misaligned slices\n\n");
    table(&mut out, &ACCURACY_HEADER, accuracy_rows(reports, &[("ideal", "full"), ("misaligned", "full")]));

    out.push_str("## Slice ablation\n\n");
    let keys: Vec<(&str, &str)> =
        ["ideal", "misaligned"].iter().flat_map(|&c| AblationConfig::ROWS.iter().map(move |(a, _)| (c, *a))).collect();
    table(&mut out, &ACCURACY_HEADER, accuracy_rows(reports, &keys));

    out.push_str("## Volumes and masses\n\n");
    out.push_str("Bland-Altman agreement of reconstructed against true values (volumes in mL, masses in g).\n\n");
    let mut rows = Vec::new();
    for &(c, a) in &keys {
        let sel: Vec<&MetricsReport> = select(reports, c, a).into_iter().filter(|r| r.lv_vol.is_finite()).collect();
        if sel.is_empty() {
            continue;
        }
        for (q, pred, truth) in [
            ("LV volume", sel.iter().map(|r| r.lv_vol).collect::<Vec<_>>(), sel.iter().map(|r| r.lv_vol_ref).collect::<Vec<_>>()),
            ("RV volume", sel.iter().map(|r| r.rv_vol).collect(), sel.iter().map(|r| r.rv_vol_ref).collect()),
            ("LV mass", sel.iter().map(|r| r.lv_mass).collect(), sel.iter().map(|r| r.lv_mass_ref).collect()),
            ("RV mass", sel.iter().map(|r| r.rv_mass).collect(), sel.iter().map(|r| r.rv_mass_ref).collect()),
        ] {
            if let Ok(ba) = bland_altman(&truth, &pred) {
                let (tm, _) = mean_sd(&truth);
                rows.push(vec![
                    c.to_string(),
                    a.to_string(),
                    q.to_string(),
                    sel.len().to_string(),
                    format!("{tm:.1}"),
                    format!("{:.2}", ba.bias),
                    format!("{:.2}", ba.sd),
                    format!("[{:.2}, {:.2}]", ba.lower, ba.upper),
                ]);
            }
        }
    }
    table(&mut out, &["condition", "slices", "quantity", "cases", "true mean", "bias", "sd", "limits of agreement"], rows);

    out.push_str("## Timing\n\n");
    let mut rows = Vec::new();
    for m in manifests {
        if let Some(t) = m.durations.get(&m.stage) {
            rows.push(vec![m.stage.clone(), format!("{t:.1}")]);
        }
    }
    table(&mut out, &["stage", "seconds"], rows);
    if let Some(recon) = manifests.iter().find(|m| m.stage == "reconstruct") {
        let per_case: Vec<f64> = recon.durations.iter().filter(|(k, _)| k.starts_with("case/")).map(|(_, v)| *v).collect();
        if !per_case.is_empty() {
            let (m, s) = mean_sd(&per_case);
            let max = per_case.iter().cloned().fold(f64::MIN, f64::max);
            let _ = writeln!(
                out,
                "Per-case latent fit: {m:.2} ± {s:.2} s, max {max:.2} s over {} cases (budget {} s).\n",
                per_case.len(),
                config.inference_budget_s
            );
        }
    }
    out
}
