//! Weight archives, anomaly-map images and metric reports.

mod archive;
mod export;

pub use archive::{decode_archive, encode_archive, load_archive, save_archive, MAGIC, VERSION};
pub use export::{
    export_anomaly_map, read_map_sidecar, read_report_sidecar, render_report_csv, sidecar_path, write_report,
    MapSidecar, ReportFile,
};
