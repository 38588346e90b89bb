//! Shared fixtures for the benchmarks.

use pfcm_core::dataset::{
    generate_synthetic, partition_by_subject, ClientDataset, LabelScheme, NormStats, SyntheticSpec,
};

/// Preprocessed synthetic clients with the default generator settings.
pub fn synthetic_clients(num_clients: usize, seed: u64) -> Vec<ClientDataset> {
    let spec = SyntheticSpec {
        num_clients,
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).expect("valid synthetic spec");
    let stats = NormStats::fit(&data.records).expect("non-empty data");
    partition_by_subject(data.records)
        .iter()
        .map(|s| {
            ClientDataset::from_subject(s, &stats, LabelScheme::ThreeClass)
                .expect("valid records")
                .0
        })
        .collect()
}
