//! CSV artifacts.
//!
//! Every file starts with `#`-prefixed provenance lines (the effective
//! configuration), followed by a mandatory header row. Numbers use the
//! shortest representation that round-trips, so identical inputs give
//! identical bytes.

use std::io::{Read, Write};

use crate::bellman::{Action, BeliefGrid, ValueTable};
use crate::error::{Error, Result};
use crate::model::{BatteryQuanta, ModelParams};
use crate::policy::{PolicyTable, ThresholdProfile};
use crate::sim::{SimReport, SweepRow, TraceRow};
use crate::verify::CheckReport;

/// Opening lines of every artifact: each provenance line prefixed with `# `.
pub fn write_provenance(w: &mut impl Write, provenance: &str) -> Result<()> {
    for line in provenance.lines() {
        if line.is_empty() {
            writeln!(w, "#")?;
        } else {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Table(format!("{other:?}")),
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Columns `u, b, p, v, v_defer, v_sense, v_transmit`; infeasible actions are empty.
pub fn write_value_table(
    w: impl Write,
    provenance: &str,
    params: &ModelParams,
    grid: &BeliefGrid,
    table: &ValueTable,
) -> Result<()> {
    let mut w = w;
    write_provenance(&mut w, provenance)?;
    let mut out = csv_writer(w);
    out.write_record(["u", "b", "p", "v", "v_defer", "v_sense", "v_transmit"])
        .map_err(csv_err)?;
    for u in 0..table.levels() {
        let b = BatteryQuanta(u as u32).level(params.k);
        for (j, &p) in grid.nodes().iter().enumerate() {
            out.write_record([
                u.to_string(),
                num(b),
                num(p),
                num(table.value(u, j)),
                opt(table.action_value(u, j, Action::Defer)),
                opt(table.action_value(u, j, Action::Sense)),
                opt(table.action_value(u, j, Action::Transmit)),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read back the `u, p, v` columns of a value-table CSV. Rows must come in
/// battery-major order with the same belief nodes in every row.
pub fn read_value_table(r: impl Read) -> Result<(BeliefGrid, ValueTable)> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Table(format!("missing column `{name}`")))
    };
    let (cu, cp, cv) = (col("u")?, col("p")?, col("v")?);
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let bad = |what: &str| Error::Table(format!("data row {}: bad {what}", i + 1));
        let u = field(cu).parse().map_err(|_| bad("u"))?;
        let p = field(cp).parse().map_err(|_| bad("p"))?;
        let v = field(cv).parse().map_err(|_| bad("v"))?;
        rows.push((u, p, v));
    }
    let nodes: Vec<f64> = rows.iter().take_while(|r| r.0 == 0).map(|r| r.1).collect();
    if nodes.is_empty() || !rows.len().is_multiple_of(nodes.len()) {
        return Err(Error::Table(
            "rows do not form a complete battery x belief grid".into(),
        ));
    }
    let width = nodes.len();
    let levels = rows.len() / width;
    for (i, &(u, p, _)) in rows.iter().enumerate() {
        if u != i / width || p != nodes[i % width] {
            return Err(Error::Table(format!(
                "data row {} out of grid order",
                i + 1
            )));
        }
    }
    let grid = BeliefGrid::from_nodes(nodes)?;
    let table = ValueTable::from_fn(levels, width, |u, j| rows[u * width + j].2);
    Ok((grid, table))
}

/// Columns `u, b, p, action`.
pub fn write_policy_map(w: impl Write, provenance: &str, policy: &PolicyTable) -> Result<()> {
    let mut w = w;
    write_provenance(&mut w, provenance)?;
    let mut out = csv_writer(w);
    out.write_record(["u", "b", "p", "action"])
        .map_err(csv_err)?;
    for u in 0..policy.levels() {
        let b = BatteryQuanta(u as u32).level(policy.k());
        for (j, &p) in policy.nodes().iter().enumerate() {
            out.write_record([
                u.to_string(),
                num(b),
                num(p),
                policy.action(u, j).letter().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Columns `u, b, pattern, rho1, rho2, rho3`; absent thresholds are empty.
pub fn write_thresholds(w: impl Write, provenance: &str, profile: &ThresholdProfile) -> Result<()> {
    let mut w = w;
    write_provenance(&mut w, provenance)?;
    let mut out = csv_writer(w);
    out.write_record(["u", "b", "pattern", "rho1", "rho2", "rho3"])
        .map_err(csv_err)?;
    for row in &profile.rows {
        out.write_record([
            row.quanta.to_string(),
            num(row.level),
            row.pattern.name().to_string(),
            opt(row.rho[0]),
            opt(row.rho[1]),
            opt(row.rho[2]),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `q, policy, throughput_mean, ci_half_width, replications, horizon`.
pub fn write_sweep(w: impl Write, provenance: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = w;
    write_provenance(&mut w, provenance)?;
    let mut out = csv_writer(w);
    out.write_record([
        "q",
        "policy",
        "throughput_mean",
        "ci_half_width",
        "replications",
        "horizon",
    ])
    .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            num(r.q),
            r.policy.name().to_string(),
            num(r.throughput.mean),
            num(r.throughput.ci_half_width),
            r.throughput.samples.to_string(),
            r.horizon.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per simulated replication.
pub fn write_runs(w: impl Write, provenance: &str, policy: &str, runs: &[SimReport]) -> Result<()> {
    let mut w = w;
    write_provenance(&mut w, provenance)?;
    let mut out = csv_writer(w);
    out.write_record([
        "replication",
        "policy",
        "seed",
        "slots",
        "total_bits",
        "throughput",
        "discounted_reward",
        "n_defer",
        "n_sense",
        "n_transmit",
    ])
    .map_err(csv_err)?;
    for (i, r) in runs.iter().enumerate() {
        out.write_record([
            i.to_string(),
            policy.to_string(),
            r.seed.to_string(),
            r.slots.to_string(),
            num(r.total_bits),
            num(r.throughput),
            num(r.discounted_reward),
            r.action_counts[0].to_string(),
            r.action_counts[1].to_string(),
            r.action_counts[2].to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `slot, u, belief, action, channel, reward`.
pub fn write_trace(w: impl Write, provenance: &str, trace: &[TraceRow]) -> Result<()> {
    let mut w = w;
    write_provenance(&mut w, provenance)?;
    let mut out = csv_writer(w);
    out.write_record(["slot", "u", "belief", "action", "channel", "reward"])
        .map_err(csv_err)?;
    for t in trace {
        out.write_record([
            t.slot.to_string(),
            t.battery.get().to_string(),
            num(t.belief),
            t.action.letter().to_string(),
            t.channel.as_bit().to_string(),
            num(t.reward),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `check, passed, worst, u, p, detail`.
pub fn write_verification(w: impl Write, provenance: &str, reports: &[CheckReport]) -> Result<()> {
    let mut w = w;
    write_provenance(&mut w, provenance)?;
    let mut out = csv_writer(w);
    out.write_record(["check", "passed", "worst", "u", "p", "detail"])
        .map_err(csv_err)?;
    for r in reports {
        let (u, p) = match r.location {
            Some((u, p)) => (
                u.to_string(),
                if p.is_nan() { String::new() } else { num(p) },
            ),
            None => (String::new(), String::new()),
        };
        out.write_record([
            r.name.clone(),
            r.passed.to_string(),
            num(r.worst),
            u,
            p,
            r.detail.clone(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::{value_iteration, SolverSettings};
    use crate::model::presets;
    use crate::policy::{detect_thresholds, extract_policy};
    use proptest::prelude::*;

    #[test]
    fn value_table_round_trip() {
        let p = presets::costly_sensing();
        let grid = BeliefGrid::new(&p, 20).unwrap();
        let table = value_iteration(&p, &grid, &SolverSettings::for_params(&p)).unwrap();
        let mut buf = Vec::new();
        write_value_table(&mut buf, "a = 1\nb = \"x\"", &p, &grid, &table).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# a = 1\n# b = \"x\"\nu,b,p,v,v_defer,v_sense,v_transmit\n"));
        // u = 0: only defer is feasible
        assert!(text.lines().nth(3).unwrap().ends_with(",,"));
        let (g2, t2) = read_value_table(buf.as_slice()).unwrap();
        assert_eq!(g2, grid);
        assert_eq!(t2.values(), table.values());
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let missing = "u,p\n0,0\n";
        assert!(read_value_table(missing.as_bytes()).is_err());
        let ragged = "u,p,v\n0,0,1\n0,1,2\n1,0,3\n";
        assert!(read_value_table(ragged.as_bytes()).is_err());
        let shuffled = "u,p,v\n0,0,1\n0,1,2\n1,1,3\n1,0,4\n";
        assert!(read_value_table(shuffled.as_bytes()).is_err());
        let garbage = "u,p,v\n0,zero,1\n";
        assert!(read_value_table(garbage.as_bytes()).is_err());
    }

    #[test]
    fn policy_and_threshold_files() {
        let p = presets::scarce_energy();
        let grid = BeliefGrid::new(&p, 10).unwrap();
        let table = value_iteration(&p, &grid, &SolverSettings::for_params(&p)).unwrap();
        let policy = extract_policy(&p, &grid, &table);
        let mut buf = Vec::new();
        write_policy_map(&mut buf, "", &policy).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + p.battery_levels() * grid.len());
        assert_eq!(text.lines().nth(1).unwrap(), "0,0,0,D");

        let profile = detect_thresholds(&policy).unwrap();
        let mut buf = Vec::new();
        write_thresholds(&mut buf, "", &profile).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "u,b,pattern,rho1,rho2,rho3");
        assert_eq!(text.lines().nth(1).unwrap(), "0,0,all-D,,,");
    }

    proptest! {
        #[test]
        fn numbers_round_trip_through_text(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            prop_assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
