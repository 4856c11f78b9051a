//! CSV and JSON serialization of simulation artifacts.
//!
//! Numeric columns are written with Rust's default `f64` formatting, which
//! produces the shortest decimal string that round-trips exactly, so CSV
//! round trips are bit-faithful.

use std::io::{Read, Write};

use crate::continuum::{CoefficientTable, PriceScenario, STATE_DIM};
use crate::error::{Error, Result};
use crate::supply::{NoiseLattice, SupplyPath};
use crate::tree::TreeSolution;

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidData(format!("cannot parse {what} from {field:?}")))
}

/// Writes a supply path as `t,Q,dW` (the final row has an empty `dW` cell:
/// increments lead their step, so there is one fewer than grid points).
pub fn write_supply_path_csv<W: Write>(path: &SupplyPath, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "Q", "dW"])?;
    for (k, (&t, &q)) in path.grid.iter().zip(&path.values).enumerate() {
        let dw = path
            .increments
            .get(k)
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([t.to_string(), q.to_string(), dw])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a supply path written by [`write_supply_path_csv`] (the `dW`
/// column is optional).
pub fn read_supply_path_csv<R: Read>(reader: R) -> Result<SupplyPath> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "t" || &headers[1] != "Q" {
        return Err(Error::InvalidData("expected header t,Q[,dW]".into()));
    }
    let has_dw = headers.len() >= 3 && &headers[2] == "dW";
    let (mut grid, mut values, mut increments) = (Vec::new(), Vec::new(), Vec::new());
    for row in r.records() {
        let row = row?;
        grid.push(parse_f64(&row[0], "t")?);
        values.push(parse_f64(&row[1], "Q")?);
        if has_dw && row.len() >= 3 && !row[2].trim().is_empty() {
            increments.push(parse_f64(&row[2], "dW")?);
        }
    }
    if grid.len() < 2 {
        return Err(Error::InvalidData("supply path needs at least two rows".into()));
    }
    if !increments.is_empty() && increments.len() != grid.len() - 1 {
        return Err(Error::InvalidData(format!(
            "{} increments for {} grid points",
            increments.len(),
            grid.len()
        )));
    }
    Ok(SupplyPath {
        grid,
        values,
        increments,
    })
}

/// Column names of the coefficient-table CSV.
pub fn coefficient_header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "a0".to_string()];
    for j in 1..=4 {
        h.push(format!("a1_{j}"));
    }
    for j in 1..=10 {
        h.push(format!("a2_{j}"));
    }
    h
}

/// Writes a coefficient table as `t,a0,a1_1..a1_4,a2_1..a2_10`.
pub fn write_coefficient_table_csv<W: Write>(table: &CoefficientTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(coefficient_header())?;
    for (t, values) in table.grid.iter().zip(&table.values) {
        let mut row = vec![t.to_string()];
        row.extend(values.iter().map(|v| v.to_string()));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a coefficient table written by [`write_coefficient_table_csv`].
pub fn read_coefficient_table_csv<R: Read>(reader: R) -> Result<CoefficientTable> {
    let mut r = csv::Reader::from_reader(reader);
    let expected = coefficient_header();
    let headers = r.headers()?.clone();
    if headers.iter().map(str::to_string).collect::<Vec<_>>() != expected {
        return Err(Error::InvalidData(
            "unexpected coefficient-table header".into(),
        ));
    }
    let (mut grid, mut values) = (Vec::new(), Vec::new());
    for row in r.records() {
        let row = row?;
        if row.len() != 1 + STATE_DIM {
            return Err(Error::InvalidData("short coefficient row".into()));
        }
        grid.push(parse_f64(&row[0], "t")?);
        let mut a = [0.0; STATE_DIM];
        for (j, slot) in a.iter_mut().enumerate() {
            *slot = parse_f64(&row[j + 1], "coefficient")?;
        }
        values.push(a);
    }
    if grid.len() < 2 {
        return Err(Error::InvalidData("coefficient table needs >= 2 rows".into()));
    }
    Ok(CoefficientTable {
        t_horizon: *grid.last().unwrap(),
        grid,
        values,
    })
}

/// Writes one scenario as `t,Xbar,Q,price`.
pub fn write_price_scenario_csv<W: Write>(scenario: &PriceScenario, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "Xbar", "Q", "price"])?;
    for k in 0..scenario.grid.len() {
        w.write_record([
            scenario.grid[k].to_string(),
            scenario.xbar[k].to_string(),
            scenario.q[k].to_string(),
            scenario.price[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a scenario written by [`write_price_scenario_csv`].
pub fn read_price_scenario_csv<R: Read>(reader: R) -> Result<PriceScenario> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let expected = ["t", "Xbar", "Q", "price"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::InvalidData("expected header t,Xbar,Q,price".into()));
    }
    let mut out = PriceScenario {
        grid: Vec::new(),
        xbar: Vec::new(),
        q: Vec::new(),
        price: Vec::new(),
    };
    for row in r.records() {
        let row = row?;
        out.grid.push(parse_f64(&row[0], "t")?);
        out.xbar.push(parse_f64(&row[1], "Xbar")?);
        out.q.push(parse_f64(&row[2], "Q")?);
        out.price.push(parse_f64(&row[3], "price")?);
    }
    if out.grid.len() < 2 {
        return Err(Error::InvalidData("scenario needs at least two rows".into()));
    }
    Ok(out)
}

/// Writes an ensemble of scenarios in long form:
/// `scenario,t,Xbar,Q,price`.
pub fn write_scenario_ensemble_csv<W: Write>(
    scenarios: &[PriceScenario],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "t", "Xbar", "Q", "price"])?;
    for (s, scenario) in scenarios.iter().enumerate() {
        for k in 0..scenario.grid.len() {
            w.write_record([
                s.to_string(),
                scenario.grid[k].to_string(),
                scenario.xbar[k].to_string(),
                scenario.q[k].to_string(),
                scenario.price[k].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes per-time ensemble statistics of the price: `t,mean,sd`.
pub fn write_ensemble_stats_csv<W: Write>(scenarios: &[PriceScenario], writer: W) -> Result<()> {
    if scenarios.is_empty() {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    let len = scenarios[0].grid.len();
    if scenarios.iter().any(|s| s.grid.len() != len) {
        return Err(Error::ShapeMismatch("scenarios must share a grid".into()));
    }
    let n = scenarios.len() as f64;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "mean", "sd"])?;
    for k in 0..len {
        let mean = scenarios.iter().map(|s| s.price[k]).sum::<f64>() / n;
        let var = scenarios
            .iter()
            .map(|s| (s.price[k] - mean) * (s.price[k] - mean))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        w.write_record([
            scenarios[0].grid[k].to_string(),
            mean.to_string(),
            var.sqrt().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a finite-player solution as one row per decision node:
/// `k,j,t,Q,price,v_0..v_{N-1}`.
pub fn write_tree_solution_csv<W: Write>(
    solution: &TreeSolution,
    lattice: &NoiseLattice,
    writer: W,
) -> Result<()> {
    let n = solution.v.len();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "k".to_string(),
        "j".to_string(),
        "t".to_string(),
        "Q".to_string(),
        "price".to_string(),
    ];
    header.extend((0..n).map(|i| format!("v_{i}")));
    w.write_record(header)?;
    for (k, level) in solution.price.iter().enumerate() {
        for (j, &price) in level.iter().enumerate() {
            let mut row = vec![
                k.to_string(),
                j.to_string(),
                lattice.time(k).to_string(),
                lattice.levels[k][j].to_string(),
                price.to_string(),
            ];
            row.extend((0..n).map(|i| solution.v[i][k][j].to_string()));
            w.write_record(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Serializes any value as pretty JSON, trailing newline included.
pub fn write_json<W: Write, T: serde::Serialize>(value: &T, mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuum::{integrate_coefficients, simulate_price, MeanRevertingSupply};
    use crate::market::MarketParams;
    use crate::supply::{euler_simulate, LinearSupplyModel, NoiseKind};

    #[test]
    fn supply_path_csv_round_trip_is_exact() {
        let model = LinearSupplyModel::mean_reverting(
            1.0,
            |t: f64| (2.0 * std::f64::consts::PI * t).sin(),
            0.05,
        );
        let path = euler_simulate(&model, 0.1, 11, 1.0, 3, 0, NoiseKind::Gaussian).unwrap();
        let mut buf = Vec::new();
        write_supply_path_csv(&path, &mut buf).unwrap();
        let back = read_supply_path_csv(buf.as_slice()).unwrap();
        assert_eq!(path, back);
    }

    #[test]
    fn coefficient_table_csv_round_trip_is_exact() {
        let params = MarketParams::new(1.0, 1.0, 1.0, 2.0, 0.25, 0.25).unwrap();
        let supply = MeanRevertingSupply::new(|_| 0.2, 0.05).unwrap();
        let table = integrate_coefficients(&params, &supply, 120).unwrap();
        let mut buf = Vec::new();
        write_coefficient_table_csv(&table, &mut buf).unwrap();
        let back = read_coefficient_table_csv(buf.as_slice()).unwrap();
        assert_eq!(table.grid, back.grid);
        assert_eq!(table.values, back.values);
        assert_eq!(table.t_horizon, back.t_horizon);
    }

    #[test]
    fn scenario_csv_round_trip_is_exact() {
        let params = MarketParams::new(1.0, 1.0, 1.0, 2.0, 0.25, 0.25).unwrap();
        let supply = MeanRevertingSupply::new(|_| 0.2, 0.05).unwrap();
        let table = integrate_coefficients(&params, &supply, 200).unwrap();
        let scenario =
            simulate_price(&params, &table, &supply, 0.5, 0.1, 16, 11, 2, NoiseKind::Gaussian)
                .unwrap();
        let mut buf = Vec::new();
        write_price_scenario_csv(&scenario, &mut buf).unwrap();
        let back = read_price_scenario_csv(buf.as_slice()).unwrap();
        assert_eq!(scenario, back);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(read_supply_path_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(read_price_scenario_csv("t,x,q,w\n0,0,0,0\n".as_bytes()).is_err());
    }
}
