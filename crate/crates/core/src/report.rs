//! Run reports and their table, CSV and JSON renderings.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::infra::{LeaseId, Millicents, ResourceId, ResourceKind, Tariff};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("write failed: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResourceRow {
    pub id: ResourceId,
    pub org: String,
    pub kind: ResourceKind,
    pub cores: u32,
    pub rate_mcps: u64,
    pub jobs: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeaseRow {
    pub lease: LeaseId,
    /// Sub-simulation the lease belongs to; empty for bag runs.
    pub stream: String,
    pub resource: ResourceId,
    pub tariff: Tariff,
    pub start_ms: u64,
    pub end_ms: u64,
    pub billed_mc: Millicents,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamRow {
    pub stream_id: String,
    pub requests: u32,
    pub cap: u32,
    pub instances: u32,
    pub mean_response_ms: f64,
    pub max_response_ms: u64,
    pub spent_mc: Millicents,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SettlementRow {
    pub sla_id: u32,
    pub req_id: String,
    pub offer_id: String,
    pub slots: u32,
    pub price_mc: Millicents,
    pub delivered_slot_ms: u64,
    pub violations: u64,
    pub price_due_mc: Millicents,
    pub penalty_mc: Millicents,
    pub net_mc: Millicents,
    pub excess_penalty_mc: Millicents,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub strategy: Option<String>,
    pub makespan_ms: u64,
    pub deadline_ms: Option<u64>,
    pub deadline_met: bool,
    pub total_tasks: u32,
    pub completed_tasks: u32,
    pub failed_tasks: u32,
    pub unfinished_tasks: u32,
    pub tasks_local: u32,
    pub tasks_cloud: u32,
    pub nodes_provisioned: u32,
    pub budget_mc: Option<Millicents>,
    pub spent_mc: Millicents,
    pub spent_usd: String,
    pub flags: Vec<String>,
    pub resources: Vec<ResourceRow>,
    pub streams: Vec<StreamRow>,
    pub settlements: Vec<SettlementRow>,
    pub unmatched_requirements: Vec<String>,
    pub leases: Vec<LeaseRow>,
    pub events_processed: u64,
    /// SHA-256 of the processed event log.
    pub event_log_sha256: String,
}

impl SimReport {
    pub fn jobs_on(&self, org: &str) -> u32 {
        self.resources
            .iter()
            .filter(|r| r.org == org)
            .map(|r| r.jobs)
            .sum()
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        let run = [
            self.scenario.clone(),
            self.seed.to_string(),
            self.strategy.clone().unwrap_or_default(),
            self.makespan_ms.to_string(),
            self.deadline_ms.map(|d| d.to_string()).unwrap_or_default(),
            self.deadline_met.to_string(),
            self.spent_mc.0.to_string(),
            self.spent_usd.clone(),
            self.nodes_provisioned.to_string(),
        ];
        let mut rows = 0;
        for r in &self.resources {
            let mut rec: Vec<String> = run.to_vec();
            rec.extend([
                "resource".into(),
                r.id.to_string(),
                r.org.clone(),
                r.rate_mcps.to_string(),
                r.jobs.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]);
            w.write_record(&rec)?;
            rows += 1;
        }
        for s in &self.streams {
            let mut rec: Vec<String> = run.to_vec();
            rec.extend([
                "stream".into(),
                s.stream_id.clone(),
                String::new(),
                String::new(),
                String::new(),
                s.requests.to_string(),
                s.cap.to_string(),
                format!("{:.3}", s.mean_response_ms),
                s.max_response_ms.to_string(),
            ]);
            w.write_record(&rec)?;
            rows += 1;
        }
        if rows == 0 {
            let mut rec: Vec<String> = run.to_vec();
            rec.push("run".into());
            rec.extend(std::iter::repeat_n(String::new(), 8));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Scenario: {} (seed {})", self.scenario, self.seed);
        if let Some(s) = &self.strategy {
            let _ = writeln!(out, "Strategy: {s}");
        }
        if self.strategy.as_deref() == Some("provision") {
            out.push_str(&render(
                &[
                    "Deadline (Seconds)",
                    "Execution Time (Seconds)",
                    "Deadline Met?",
                    "Cloud Nodes Provisioned",
                    "Tasks on Local Resources",
                    "Tasks on Cloud (EC2)",
                    "Budget Spent (US$)",
                ],
                &[vec![
                    self.deadline_ms.map(secs).unwrap_or_default(),
                    secs(self.makespan_ms),
                    if self.deadline_met { "Yes" } else { "No" }.into(),
                    self.nodes_provisioned.to_string(),
                    self.tasks_local.to_string(),
                    self.tasks_cloud.to_string(),
                    self.spent_usd.clone(),
                ]],
            ));
        } else if !self.resources.is_empty() && self.total_tasks > 0 {
            let rows: Vec<Vec<String>> = self
                .resources
                .iter()
                .map(|r| {
                    vec![
                        r.org.clone(),
                        r.id.to_string(),
                        r.rate_mcps.to_string(),
                        r.jobs.to_string(),
                    ]
                })
                .collect();
            out.push_str(&render(
                &[
                    "Organization",
                    "Resource",
                    "Rate (Cents per second*1000)",
                    "Total Jobs",
                ],
                &rows,
            ));
            let _ = writeln!(
                out,
                "Total Price / Budget Consumed: {} / {} (US$)",
                self.spent_usd,
                self.budget_mc
                    .map(|b| b.to_usd_string())
                    .unwrap_or_default()
            );
            let _ = writeln!(
                out,
                "Execution Time: {} s (deadline {} s, met: {})",
                secs(self.makespan_ms),
                self.deadline_ms.map(secs).unwrap_or_default(),
                if self.deadline_met { "Yes" } else { "No" }
            );
        }
        if !self.streams.is_empty() {
            let rows: Vec<Vec<String>> = self
                .streams
                .iter()
                .map(|s| {
                    vec![
                        s.requests.to_string(),
                        s.cap.to_string(),
                        s.instances.to_string(),
                        format!("{:.3}", s.mean_response_ms / 1000.0),
                        secs(s.max_response_ms),
                        s.spent_mc.to_usd_string(),
                    ]
                })
                .collect();
            out.push_str(&render(
                &[
                    "Requests",
                    "Resource Cap",
                    "Instances Used",
                    "Mean Response Time (Seconds)",
                    "Max Response Time (Seconds)",
                    "Cost (US$)",
                ],
                &rows,
            ));
        }
        if !self.settlements.is_empty() {
            let rows: Vec<Vec<String>> = self
                .settlements
                .iter()
                .map(|s| {
                    vec![
                        format!("sla-{}", s.sla_id),
                        s.req_id.clone(),
                        s.offer_id.clone(),
                        s.slots.to_string(),
                        s.price_mc.0.to_string(),
                        s.violations.to_string(),
                        s.penalty_mc.0.to_string(),
                        s.net_mc.0.to_string(),
                    ]
                })
                .collect();
            out.push_str(&render(
                &[
                    "SLA",
                    "Requirement",
                    "Offer",
                    "Slots",
                    "Price (mc)",
                    "Violations",
                    "Penalty (mc)",
                    "Net (mc)",
                ],
                &rows,
            ));
        }
        for r in &self.unmatched_requirements {
            let _ = writeln!(out, "Unmatched requirement: {r}");
        }
        if !self.flags.is_empty() {
            let _ = writeln!(out, "Flags: {}", self.flags.join(", "));
        }
        out
    }

    pub fn emit(&self, format: Format, sink: &mut impl Write) -> Result<(), ReportError> {
        let text = match format {
            Format::Table => self.to_table(),
            Format::Csv => self.to_csv()?,
            Format::Json => {
                let mut s = self.to_json()?;
                s.push('\n');
                s
            }
        };
        sink.write_all(text.as_bytes())?;
        sink.flush()?;
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 18] = [
    "scenario",
    "seed",
    "strategy",
    "makespan_ms",
    "deadline_ms",
    "deadline_met",
    "spent_mc",
    "spent_usd",
    "nodes_provisioned",
    "section",
    "id",
    "org",
    "rate_mcps",
    "jobs",
    "requests",
    "cap",
    "mean_response_ms",
    "max_response_ms",
];

fn secs(ms: u64) -> String {
    format!("{}.{:03}", ms / 1000, ms % 1000)
}

fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(&mut header.iter().copied());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}
