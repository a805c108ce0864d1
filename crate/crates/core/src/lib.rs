pub mod compute_profile;
pub mod device_model;
pub mod gio_uring;
pub mod mapping_table;
pub mod metrics_cost;
pub mod object_store;
pub mod scheduler;
pub mod sim_engine;
pub mod workload;
