use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub ds_la: Option<f64>,
    pub hd_la: Option<f64>,
    pub ds_scar: f64,
    /// `None` when prediction or reference scar is empty.
    pub hd_scar: Option<f64>,
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub excluded: usize,
}

impl Aggregate {
    fn over(values: impl Iterator<Item = Option<f64>>) -> Option<Aggregate> {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => excluded += 1,
            }
        }
        if defined.is_empty() {
            return None;
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Aggregate {
            mean,
            std: var.sqrt(),
            n: defined.len(),
            excluded,
        })
    }

    /// `0.512(0.083)` style.
    pub fn display(&self, decimals: usize) -> String {
        format!("{:.*}({:.*})", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub cases: Vec<CaseMetrics>,
    pub ds_la: Option<Aggregate>,
    pub hd_la: Option<Aggregate>,
    pub ds_scar: Aggregate,
    pub hd_scar: Option<Aggregate>,
}

pub fn aggregate_eval(method: &str, cases: Vec<CaseMetrics>) -> Result<EvalResult> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to aggregate".into()));
    }
    let ds_la = Aggregate::over(cases.iter().map(|c| c.ds_la).filter(Option::is_some));
    let hd_la = Aggregate::over(cases.iter().filter(|c| c.ds_la.is_some()).map(|c| c.hd_la));
    let ds_scar = Aggregate::over(cases.iter().map(|c| Some(c.ds_scar))).expect("non-empty");
    let hd_scar = Aggregate::over(cases.iter().map(|c| c.hd_scar));
    let undefined = cases.iter().filter(|c| c.hd_scar.is_none()).count();
    if undefined > 0 {
        warn!("{method}: {undefined} case(s) with undefined scar HD excluded from the aggregate");
    }
    Ok(EvalResult {
        method: method.to_string(),
        cases,
        ds_la,
        hd_la,
        ds_scar,
        hd_scar,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

fn agg_cell(a: Option<Aggregate>) -> String {
    a.map(|a| a.display(3)).unwrap_or_else(|| "-".into())
}

impl EvalResult {
    /// One row per case followed by a `mean(std)` aggregate row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["case_id", "ds_la", "hd_la_mm", "ds_scar", "hd_scar_mm"])?;
        for c in &self.cases {
            w.write_record([c.case_id.clone(), cell(c.ds_la), cell(c.hd_la), cell(Some(c.ds_scar)), cell(c.hd_scar)])?;
        }
        w.write_record([
            "mean(std)".to_string(),
            agg_cell(self.ds_la),
            agg_cell(self.hd_la),
            agg_cell(Some(self.ds_scar)),
            agg_cell(self.hd_scar),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn table_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.method,
            agg_cell(self.ds_la),
            agg_cell(self.hd_la),
            agg_cell(Some(self.ds_scar)),
            agg_cell(self.hd_scar)
        )
    }
}

/// Method comparison table: LA DS/HD and scar DS/HD as `mean(std)`.
pub fn format_method_table(results: &[EvalResult]) -> String {
    let mut s = String::from("Method\tLA DS\tLA HD (mm)\tScar DS\tScar HD (mm)\n");
    for r in results {
        s += &r.table_row();
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(id: &str, ds: f64, hd: Option<f64>) -> CaseMetrics {
        CaseMetrics {
            case_id: id.into(),
            ds_la: None,
            hd_la: None,
            ds_scar: ds,
            hd_scar: hd,
        }
    }

    #[test]
    fn single_case_has_zero_std() {
        let r = aggregate_eval("m", vec![case("a", 0.7, Some(3.0))]).unwrap();
        assert_eq!(r.ds_scar.std, 0.0);
        assert_eq!(r.ds_scar.mean, 0.7);
    }

    #[test]
    fn mean_and_population_std() {
        let r = aggregate_eval("m", vec![case("a", 0.4, Some(1.0)), case("b", 0.6, Some(2.0))]).unwrap();
        assert!((r.ds_scar.mean - 0.5).abs() < 1e-12);
        assert!((r.ds_scar.std - 0.1).abs() < 1e-12);
        assert_eq!(r.ds_scar.display(3), "0.500(0.100)");
        assert!(r.ds_la.is_none());
    }

    #[test]
    fn undefined_hd_is_excluded_and_counted() {
        let r = aggregate_eval(
            "m",
            vec![case("a", 0.4, Some(1.0)), case("b", 0.0, None), case("c", 0.6, Some(3.0))],
        )
        .unwrap();
        let hd = r.hd_scar.unwrap();
        assert_eq!(hd.n, 2);
        assert_eq!(hd.excluded, 1);
        assert_eq!(hd.mean, 2.0);
        assert_eq!(r.ds_scar.n, 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(aggregate_eval("m", vec![]).is_err());
    }

    #[test]
    fn csv_has_case_rows_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let r = aggregate_eval("MDBAnet", vec![case("a", 0.4, Some(1.0)), case("b", 0.6, None)]).unwrap();
        r.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("mean(std)"));
        assert!(format_method_table(&[r]).contains("MDBAnet\t-\t-\t0.500(0.100)\t1.000(0.000)"));
    }
}
