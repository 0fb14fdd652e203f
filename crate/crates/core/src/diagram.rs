//! Processing diagrams: cores across, time downward, one band per QT.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::bench::fetch_latency;
use crate::engine::{EventKind, TraceEvent};
use crate::isa::Addr;
use crate::supervisor::CoreId;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DiagramError {
    #[error("malformed trace at cycle {cycle}, core {core}: {message}")]
    MalformedTrace {
        cycle: u64,
        core: CoreId,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Marker {
    pub cycle: u64,
    pub addr: Addr,
    pub is_meta: bool,
    pub duration: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
    pub addr: Addr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Band {
    pub label: String,
    pub start: u64,
    pub end: u64,
    pub markers: Vec<Marker>,
    pub waits: Vec<Interval>,
    pub blocks: Vec<Interval>,
}

impl Band {
    fn contains(&self, cycle: u64) -> bool {
        (self.start..=self.end).contains(&cycle)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Column {
    pub core: CoreId,
    pub bands: Vec<Band>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiagramModel {
    pub columns: Vec<Column>,
    /// Cycles covered, one past the last event.
    pub total_cycles: u64,
    pub grid: u64,
}

impl DiagramModel {
    pub fn bands(&self) -> impl Iterator<Item = (CoreId, &Band)> {
        self.columns
            .iter()
            .flat_map(|c| c.bands.iter().map(move |b| (c.core, b)))
    }

    pub fn marker_count(&self) -> usize {
        self.bands().map(|(_, b)| b.markers.len()).sum()
    }

    /// Every address the renderers print.
    pub fn addresses(&self) -> Vec<Addr> {
        let mut out: Vec<Addr> = self
            .bands()
            .flat_map(|(_, b)| {
                b.markers
                    .iter()
                    .map(|m| m.addr)
                    .chain(b.waits.iter().map(|w| w.addr))
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn malformed(e: &TraceEvent, message: impl Into<String>) -> DiagramError {
    DiagramError::MalformedTrace {
        cycle: e.cycle,
        core: e.core,
        message: message.into(),
    }
}

pub fn build_model(trace: &[TraceEvent]) -> Result<DiagramModel, DiagramError> {
    let Some(last) = trace.iter().map(|e| e.cycle).max() else {
        return Ok(DiagramModel {
            grid: 5,
            ..Default::default()
        });
    };
    let total_cycles = last + 1;
    let n_cols = trace.iter().map(|e| e.core).max().unwrap_or(0) + 1;
    let mut columns: Vec<Column> = (0..n_cols)
        .map(|core| Column {
            core,
            bands: Vec::new(),
        })
        .collect();

    // bands first; a core's QTStart may sort after its first fetch
    let mut open: BTreeMap<CoreId, Band> = BTreeMap::new();
    for e in trace {
        match e.kind {
            EventKind::QTStart => {
                if open.contains_key(&e.core) {
                    return Err(malformed(e, "QTStart inside a live band"));
                }
                open.insert(
                    e.core,
                    Band {
                        label: e.qt_label.clone(),
                        start: e.cycle,
                        end: e.cycle,
                        markers: Vec::new(),
                        waits: Vec::new(),
                        blocks: Vec::new(),
                    },
                );
            }
            EventKind::QTEnd => {
                let mut band = open
                    .remove(&e.core)
                    .ok_or_else(|| malformed(e, "QTEnd without QTStart"))?;
                if band.label != e.qt_label {
                    return Err(malformed(
                        e,
                        format!("QTEnd for {} closes {}", e.qt_label, band.label),
                    ));
                }
                band.end = e.cycle;
                columns[e.core].bands.push(band);
            }
            _ => {}
        }
    }
    for (core, mut band) in open {
        band.end = last;
        columns[core].bands.push(band);
    }
    for c in &mut columns {
        c.bands.sort_by_key(|b| b.start);
    }

    let mut wait_open: BTreeMap<CoreId, (u64, Addr)> = BTreeMap::new();
    let mut block_open: BTreeMap<CoreId, (u64, Addr)> = BTreeMap::new();
    for e in trace {
        let band = |columns: &mut Vec<Column>, cycle: u64| -> Result<usize, DiagramError> {
            columns[e.core]
                .bands
                .iter()
                .position(|b| b.contains(cycle))
                .ok_or_else(|| malformed(e, format!("{} outside any QT", e.kind)))
        };
        match e.kind {
            EventKind::FetchExec | EventKind::MetaExec => {
                let i = band(&mut columns, e.cycle)?;
                let is_meta = e.kind == EventKind::MetaExec;
                columns[e.core].bands[i].markers.push(Marker {
                    cycle: e.cycle,
                    addr: e.addr,
                    is_meta,
                    duration: if is_meta { 1 } else { fetch_latency(&e.detail) },
                });
            }
            EventKind::WaitStart => {
                wait_open.insert(e.core, (e.cycle, e.addr));
            }
            EventKind::BlockStart => {
                block_open.insert(e.core, (e.cycle, e.addr));
            }
            EventKind::WaitEnd | EventKind::BlockEnd => {
                let map = if e.kind == EventKind::WaitEnd {
                    &mut wait_open
                } else {
                    &mut block_open
                };
                let (start, addr) = map
                    .remove(&e.core)
                    .ok_or_else(|| malformed(e, format!("{} without a start", e.kind)))?;
                let i = band(&mut columns, start)?;
                let iv = Interval {
                    start,
                    end: e.cycle,
                    addr,
                };
                let b = &mut columns[e.core].bands[i];
                if e.kind == EventKind::WaitEnd {
                    b.waits.push(iv);
                } else {
                    b.blocks.push(iv);
                }
            }
            _ => {}
        }
    }
    for (map, is_wait) in [(wait_open, true), (block_open, false)] {
        for (core, (start, addr)) in map {
            if let Some(b) = columns[core].bands.iter_mut().find(|b| b.contains(start)) {
                let iv = Interval {
                    start,
                    end: last,
                    addr,
                };
                if is_wait {
                    b.waits.push(iv);
                } else {
                    b.blocks.push(iv);
                }
            }
        }
    }
    Ok(DiagramModel {
        columns,
        total_cycles,
        grid: 5,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Style {
    pub px_per_cycle: u32,
    pub column_width: u32,
    pub grid: u64,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            px_per_cycle: 8,
            column_width: 140,
            grid: 5,
        }
    }
}

const EXEC_FILL: &str = "#4a7bd0";
const META_FILL: &str = "#e0a030";
const LEFT: u32 = 50;
const TOP: u32 = 30;

pub fn render_svg(model: &DiagramModel, style: &Style) -> String {
    let cw = style.column_width;
    let px = style.px_per_cycle;
    let cols = model.columns.len() as u32;
    let width = LEFT + cw * cols.max(1) + 10;
    let height = TOP + px * (model.total_cycles as u32 + 1) + 10;
    let y = |cycle: u64| TOP + px * cycle as u32;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="8">"#
    );
    let _ = writeln!(
        s,
        r##"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="6" stroke="#c03030" stroke-width="2"/></pattern></defs>"##
    );
    // axes and grid
    let _ = writeln!(s, r##"<g id="grid" stroke="#cccccc" stroke-width="0.5">"##);
    let mut c = 0;
    while c <= model.total_cycles {
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{yy}" x2="{x2}" y2="{yy}" stroke-dasharray="2,2"/><text x="4" y="{ty}" stroke="none" fill="#666666">{c}</text>"##,
            yy = y(c),
            x2 = width - 10,
            ty = y(c) + 3,
        );
        c += style.grid.max(1);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r##"<line id="time-axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{bottom}" stroke="#000000"/>"##,
        bottom = height - 10
    );
    for (i, col) in model.columns.iter().enumerate() {
        let x0 = LEFT + cw * i as u32;
        let _ = writeln!(
            s,
            r#"<text id="col-{core}" x="{x}" y="{ty}" text-anchor="middle" font-size="10">C_{core}</text>"#,
            core = col.core,
            x = x0 + cw / 2,
            ty = TOP - 12,
        );
        for (j, band) in col.bands.iter().enumerate() {
            let bx = x0 + cw / 2 - 20;
            let (y0, y1) = (y(band.start), y(band.end + 1));
            let _ = writeln!(s, r#"<g id="band-{}-{j}">"#, col.core);
            let _ = writeln!(
                s,
                r##"<rect x="{bx}" y="{y0}" width="40" height="{h}" fill="#f4f4f4" stroke="#000000"/>"##,
                h = y1 - y0
            );
            // hooks at creation and termination
            let _ = writeln!(
                s,
                r##"<path d="M{a} {y0} h-8 v4 M{b} {y1} h8 v-4" fill="none" stroke="#000000"/>"##,
                a = bx,
                b = bx + 40
            );
            let _ = writeln!(
                s,
                r#"<text x="{tx}" y="{ty}" font-size="9">{}</text>"#,
                xml_escape(&band.label),
                tx = bx + 2,
                ty = y0 - 2
            );
            for b in &band.blocks {
                let _ = writeln!(
                    s,
                    r##"<rect class="block" x="{bx}" y="{}" width="40" height="{}" fill="url(#hatch)" stroke="#c03030"/>"##,
                    y(b.start),
                    y(b.end + 1) - y(b.start)
                );
            }
            for w in &band.waits {
                let cy = y(w.start) + px / 2;
                let _ = writeln!(
                    s,
                    r##"<circle class="wait" cx="{cx}" cy="{cy}" r="4" fill="none" stroke="#308030"/><text x="{tx}" y="{ty}" text-anchor="end" fill="#308030">{:#05x}</text><line x1="{cx}" y1="{cy}" x2="{cx}" y2="{ey}" stroke="#308030" stroke-dasharray="1,2"/>"##,
                    w.addr,
                    cx = bx - 4,
                    tx = bx - 10,
                    ty = cy + 3,
                    ey = y(w.end) + px / 2,
                );
            }
            for m in &band.markers {
                let cy = y(m.cycle) + px / 2;
                if m.is_meta {
                    let _ = writeln!(
                        s,
                        r##"<rect class="meta" x="{x}" y="{ry}" width="8" height="8" fill="{META_FILL}"/><text x="{tx}" y="{ty}">{:#05x}</text>"##,
                        m.addr,
                        x = bx + 40,
                        ry = cy - 4,
                        tx = bx + 50,
                        ty = cy + 3,
                    );
                } else {
                    let cx = bx + 20;
                    let _ = writeln!(
                        s,
                        r##"<circle class="exec" cx="{cx}" cy="{cy}" r="3.5" fill="{EXEC_FILL}"/><text x="{tx}" y="{ty}">{:#05x}</text>"##,
                        m.addr,
                        tx = cx + 6,
                        ty = cy + 3,
                    );
                    for k in 1..m.duration {
                        let _ = writeln!(
                            s,
                            r#"<circle class="tick" cx="{cx}" cy="{}" r="1.5" fill="{EXEC_FILL}"/>"#,
                            y(m.cycle + k) + px / 2
                        );
                    }
                }
            }
            let _ = writeln!(s, "</g>");
        }
    }
    let _ = writeln!(s, "</svg>");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const CELL: usize = 8;

/// ASCII diagram, one row per cycle. Cell prefix: `v` band start, `^` band
/// end, `|` inside a band; then `oADR` executable, `[ADR]` meta, `(ADR)`
/// waiting, `////` blocked.
pub fn render_text(model: &DiagramModel) -> String {
    let mut s = String::from("cycle ");
    for col in &model.columns {
        let _ = write!(s, "| {:<w$}", format!("C{}", col.core), w = CELL - 1);
    }
    s.push('\n');
    for cycle in 0..model.total_cycles {
        let sep = if cycle % model.grid.max(1) == 0 {
            '+'
        } else {
            '|'
        };
        let _ = write!(s, "{cycle:>5} ");
        for col in &model.columns {
            let cell = text_cell(col, cycle);
            let _ = write!(s, "{sep}{cell:<w$}", w = CELL);
        }
        s.push('\n');
    }
    s.lines().map(|l| format!("{}\n", l.trim_end())).collect()
}

fn text_cell(col: &Column, cycle: u64) -> String {
    let Some(b) = col.bands.iter().find(|b| b.contains(cycle)) else {
        return String::new();
    };
    let prefix = if b.start == cycle {
        'v'
    } else if b.end == cycle {
        '^'
    } else {
        '|'
    };
    let body = if let Some(m) = b.markers.iter().find(|m| m.cycle == cycle) {
        if m.is_meta {
            format!("[{:03x}]", m.addr)
        } else {
            format!("o{:03x}", m.addr)
        }
    } else if b.blocks.iter().any(|i| (i.start..=i.end).contains(&cycle)) {
        "////".to_string()
    } else if let Some(w) = b.waits.iter().find(|i| (i.start..=i.end).contains(&cycle)) {
        format!("({:03x})", w.addr)
    } else {
        String::new()
    };
    format!("{prefix}{body}")
}
