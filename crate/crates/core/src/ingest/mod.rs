//! Flow ingestion: parsing, hostname mapping, 10-second binning and
//! hourly aggregation in local time.

mod aggregate;
mod dictionary;
mod flows;
mod selection;

pub use aggregate::{
    aggregate_hourly, aggregate_hourly_from_flows, bin_10s, read_hourly_apps_csv, read_hourly_csv,
    write_hourly_apps_csv, write_hourly_csv, Bin10s, HourlyTraffic, BIN_WIDTH_MS,
};
pub use dictionary::{Dictionary, HostMapping, MODEL_CATEGORIES, SYSTEM_CATEGORY, UNMAPPED};
pub use flows::{normalize_hostname, parse_flow_records, write_flow_records, FlowRecord, ParsedFlows};
pub use selection::{
    category_selection_report, CategorySelection, MIN_PARTICIPANT_COVERAGE, MIN_TRAFFIC_SHARE, MIN_WEEK_FRACTION,
};
