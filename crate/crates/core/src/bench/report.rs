use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BenchError, Component, Side, SummaryRow, TrialRecord};

/// Flat CSV shape of a [`TrialRecord`]; absent components are empty cells.
#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    config_id: String,
    trial: u32,
    side: Side,
    timestamp_us: u64,
    wall_us: u64,
    key_generation_us: Option<u64>,
    key_processing_us: Option<u64>,
    network_us: Option<u64>,
    decryption_us: Option<u64>,
    reconstruction_us: Option<u64>,
    pq_kem_us: Option<u64>,
    failure: Option<String>,
}

impl From<&TrialRecord> for RecordRow {
    fn from(r: &TrialRecord) -> Self {
        let get = |c| r.components.get(&c).copied();
        RecordRow {
            config_id: r.config_id.clone(),
            trial: r.trial,
            side: r.side,
            timestamp_us: r.timestamp_us,
            wall_us: r.wall_us,
            key_generation_us: get(Component::KeyGeneration),
            key_processing_us: get(Component::KeyProcessing),
            network_us: get(Component::Network),
            decryption_us: get(Component::Decryption),
            reconstruction_us: get(Component::Reconstruction),
            pq_kem_us: get(Component::PqKem),
            failure: r.failure.clone(),
        }
    }
}

impl From<RecordRow> for TrialRecord {
    fn from(r: RecordRow) -> Self {
        let components: BTreeMap<Component, u64> = [
            (Component::KeyGeneration, r.key_generation_us),
            (Component::KeyProcessing, r.key_processing_us),
            (Component::Network, r.network_us),
            (Component::Decryption, r.decryption_us),
            (Component::Reconstruction, r.reconstruction_us),
            (Component::PqKem, r.pq_kem_us),
        ]
        .into_iter()
        .filter_map(|(c, v)| v.map(|v| (c, v)))
        .collect();
        TrialRecord {
            config_id: r.config_id,
            trial: r.trial,
            side: r.side,
            components,
            wall_us: r.wall_us,
            timestamp_us: r.timestamp_us,
            failure: r.failure.filter(|f| !f.is_empty()),
        }
    }
}

pub fn write_records_csv<W: Write>(out: W, records: &[TrialRecord]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(RecordRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<TrialRecord>, BenchError> {
    csv::Reader::from_reader(input)
        .deserialize::<RecordRow>()
        .map(|row| Ok(row?.into()))
        .collect()
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Bar chart of mean component latency per side, log-scale microseconds.
pub fn plot_summary_svg(rows: &[SummaryRow], path: &Path) -> Result<(), BenchError> {
    let bars: Vec<&SummaryRow> = rows
        .iter()
        .filter(|r| r.metric != "wall" && r.count > 0)
        .collect();
    if bars.is_empty() {
        return Err(BenchError::Empty);
    }
    let plot = |e: &dyn std::fmt::Display| BenchError::Plot(e.to_string());
    let labels: Vec<String> = bars
        .iter()
        .map(|r| format!("{}/{}", r.side, r.metric))
        .collect();
    let top = bars.iter().map(|r| r.mean_us).fold(1.0f64, f64::max) * 2.0;

    let width = 160 + 90 * bars.len() as u32;
    let root = SVGBackend::new(path, (width, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot(&e))?;
    let title = bars[0].config_id.clone();
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title}: mean latency"), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(110)
        .y_label_area_size(80)
        .build_cartesian_2d((0..bars.len()).into_segmented(), (0.5f64..top).log_scale())
        .map_err(|e| plot(&e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("microseconds")
        .x_labels(bars.len())
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .x_label_style(("sans-serif", 12).into_font().transform(FontTransform::Rotate90))
        .draw()
        .map_err(|e| plot(&e))?;
    let palette = [BLUE, RED, GREEN];
    chart
        .draw_series(bars.iter().enumerate().map(|(i, r)| {
            let color = palette[r.side as usize % palette.len()];
            Rectangle::new(
                [
                    (SegmentValue::Exact(i), 0.5),
                    (SegmentValue::Exact(i + 1), r.mean_us.max(0.5)),
                ],
                color.mix(0.7).filled(),
            )
        }))
        .map_err(|e| plot(&e))?;
    root.present().map_err(|e| plot(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::summarize;

    fn sample() -> Vec<TrialRecord> {
        vec![
            TrialRecord {
                config_id: "demo".into(),
                trial: 0,
                side: Side::Client,
                components: BTreeMap::from([(Component::Network, 900), (Component::PqKem, 40)]),
                wall_us: 960,
                timestamp_us: 17,
                failure: None,
            },
            TrialRecord {
                config_id: "demo".into(),
                trial: 1,
                side: Side::Qkms,
                components: BTreeMap::new(),
                wall_us: 0,
                timestamp_us: 18,
                failure: Some("unreachable".into()),
            },
        ]
    }

    #[test]
    fn records_round_trip_through_csv() {
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("config_id,trial,side,timestamp_us,wall_us,"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn summary_csv_and_plot() {
        let rows = summarize(&sample()).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("client,network,1,0,900.0"));
        let dir = std::env::temp_dir().join(format!("kw-plot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("summary.svg");
        plot_summary_svg(&rows, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("<svg") && svg.contains("client/network"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
