//! CSV and JSON-lines writers.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use gatecomm_core::eval::{EvalMetrics, MessageRow};
use gatecomm_core::traffic::{Event, EventKind, EventLog};
use gatecomm_core::train::TrainLogRecord;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

fn create(path: &Path) -> AppResult<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    File::create(path).map_err(AppError::io(path))
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: String,
    pub seed: u64,
    pub episodes: usize,
    pub mean_queue: f64,
    pub wait_s_per_veh: f64,
    pub speed_mps: f64,
    pub pct_comm: f64,
}

impl MetricsRow {
    pub fn new(mode: impl Into<String>, seed: u64, m: &EvalMetrics) -> Self {
        Self {
            mode: mode.into(),
            seed,
            episodes: m.episodes,
            mean_queue: m.mean_queue_length,
            wait_s_per_veh: m.mean_wait_time,
            speed_mps: m.mean_speed,
            pct_comm: m.pct_communication,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(AppError::io(path))
}

pub fn read_metrics(path: &Path) -> AppResult<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Message export: five message coordinates, the sender's lane-averaged
/// features and its action, one row per (episode, step, agent).
pub fn write_messages(path: &Path, rows: &[MessageRow]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let width = rows.first().map_or(5, |r| r.message.len());
    let mut header: Vec<String> = (0..width).map(|k| format!("m{k}")).collect();
    header.extend(["mean_speed", "mean_density", "mean_queue", "action"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.message.iter().map(f64::to_string).collect();
        rec.extend([r.mean_speed.to_string(), r.mean_density.to_string(), r.mean_queue.to_string(), r.action.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(AppError::io(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EventRow {
    episode: usize,
    time_s: u64,
    event: String,
    vehicle_id: Option<u64>,
    lane_id: Option<usize>,
    intersection_id: Option<usize>,
    value: f64,
}

/// Event-log export; empty cells stand for fields an event does not carry.
pub fn write_events(path: &Path, logs: &[EventLog]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for (episode, log) in logs.iter().enumerate() {
        for e in &log.events {
            w.serialize(EventRow {
                episode,
                time_s: e.time_s,
                event: e.event.as_str().to_string(),
                vehicle_id: e.vehicle_id,
                lane_id: e.lane_id,
                intersection_id: e.intersection_id,
                value: e.value,
            })?;
        }
    }
    w.flush().map_err(AppError::io(path))
}

/// Reads an event export back into per-episode logs.
pub fn read_events(path: &Path, num_intersections: usize) -> AppResult<Vec<EventLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut logs: Vec<EventLog> = Vec::new();
    for row in r.deserialize() {
        let row: EventRow = row?;
        let event = EventKind::parse(&row.event).ok_or_else(|| AppError::Parse {
            path: path.to_path_buf(),
            message: format!("unknown event {:?}", row.event),
        })?;
        while logs.len() <= row.episode {
            logs.push(EventLog { num_intersections, events: Vec::new() });
        }
        logs[row.episode].events.push(Event {
            time_s: row.time_s,
            event,
            vehicle_id: row.vehicle_id,
            lane_id: row.lane_id,
            intersection_id: row.intersection_id,
            value: row.value,
        });
    }
    Ok(logs)
}

/// Training-log line written at every evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub episode: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub epsilon: f64,
    pub train_return: f64,
    pub loss_td: Option<f64>,
    pub loss_ce: Option<f64>,
    pub kl_m: Option<f64>,
    pub kl_c: Option<f64>,
    pub loss_total: Option<f64>,
    pub grad_norm: Option<f64>,
    pub eval: EvalMetrics,
}

impl LogLine {
    /// `None` for records without an evaluation.
    pub fn from_record(r: &TrainLogRecord) -> Option<Self> {
        let eval = r.eval.clone()?;
        let l = r.loss.as_ref();
        Some(Self {
            episode: r.episode,
            env_steps: r.env_steps,
            updates: r.updates,
            epsilon: r.epsilon,
            train_return: r.train_return,
            loss_td: l.map(|l| l.td),
            loss_ce: l.map(|l| l.ce),
            kl_m: l.map(|l| l.kl_message),
            kl_c: l.map(|l| l.kl_gate),
            loss_total: l.map(|l| l.total),
            grad_norm: l.map(|l| l.grad_norm),
            eval,
        })
    }
}

/// Append-only JSON-lines sink.
pub struct JsonLines {
    path: std::path::PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn append(path: &Path) -> AppResult<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(AppError::io(dir))?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(AppError::io(path))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> AppResult<()> {
        serde_json::to_writer(&mut self.out, value)
            .map_err(|e| AppError::Parse { path: self.path.clone(), message: e.to_string() })?;
        self.out.write_all(b"\n").map_err(AppError::io(&self.path))?;
        // Flushed per line so an interrupted run leaves a readable log.
        self.out.flush().map_err(AppError::io(&self.path))
    }
}
