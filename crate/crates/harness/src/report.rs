//! CSV output: `strategy,servers,metric,value[,server_index]`.

use std::io::Write;

use crate::experiment::ExperimentReport;

pub const HEADER: [&str; 5] = ["strategy", "servers", "metric", "value", "server_index"];

/// Writes one row per metric and one `share` row per server. Accuracy is
/// written as `NA` when nothing was reused.
pub fn emit_csv<W: Write>(reports: &[ExperimentReport], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(HEADER)?;
    for r in reports {
        let strategy = r.strategy.to_string();
        let servers = r.servers.to_string();
        let mut row = |metric: &str, value: String| w.write_record([strategy.as_str(), &servers, metric, &value]);
        row("percent_reuse", fmt(r.percent_reuse))?;
        row("reuse_accuracy", r.reuse_accuracy.map_or_else(|| "NA".to_string(), fmt))?;
        row("overhead_p50_us", fmt(r.overhead_p50_us))?;
        row("overhead_p99_us", fmt(r.overhead_p99_us))?;
        row("epochs", fmt(r.epochs))?;
        row("migrated_entries", fmt(r.migrated_entries))?;
        for (i, share) in r.per_server_share.iter().enumerate() {
            w.write_record([strategy.as_str(), &servers, "share", &fmt(*share), &i.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use dedup_core::Strategy;

    #[test]
    fn rows_follow_schema() {
        let report = ExperimentReport {
            strategy: Strategy::RoundRobin,
            servers: 2,
            reps: 1,
            percent_reuse: 50.0,
            per_server_share: vec![50.0, 50.0],
            reuse_accuracy: None,
            overhead_p50_us: 1.0,
            overhead_p99_us: 2.0,
            epochs: 0.0,
            migrated_entries: 0.0,
            valid: true,
        };
        let mut buf = Vec::new();
        emit_csv(&[report], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "strategy,servers,metric,value,server_index");
        assert_eq!(lines[1], "round-robin,2,percent_reuse,50.0000");
        assert_eq!(lines[2], "round-robin,2,reuse_accuracy,NA");
        assert_eq!(lines[7], "round-robin,2,share,50.0000,0");
        assert_eq!(lines.len(), 9);
    }
}
