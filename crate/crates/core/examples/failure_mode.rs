//! Fits the single-field model, the mixture and Fay-Herriot to one perturbed
//! copy of a two-field synthetic truth and prints their errors.
//!
//! The Moran basis is constant across cells within an area, so the
//! single-field model has to share one spatial pattern between both groups
//! of cells; the mixture can give each group its own.
//!
//! ```text
//! cargo run --release -p msmm --example failure_mode [seed]
//! ```

use msmm::fay_herriot::{fit_fh, FhConfig};
use msmm::mixture::{fit_msmm, MixtureConfig};
use msmm::msm::{fit_msm, MsmConfig};
use msmm::posterior::predict_summaries;
use msmm::simulation::{amse, perturb, rand_index, two_field_fixture, TwoFieldSpec};
use msmm::{McmcSettings, Observations};

fn main() -> msmm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let f = two_field_fixture(TwoFieldSpec::default(), seed)?;
    let data = perturb(&f.truth, &mut msmm::seed::rng_from_seed(seed))?;
    let obs = Observations::from_log_table(&data)?;
    let mcmc = McmcSettings { iterations: 5000, burn_in: 1000, thin: 1, seed };
    let mean_d = obs.d().mean();

    let msm = fit_msm(&obs, &f.design, &f.basis, &MsmConfig { mcmc, ..Default::default() })?;
    let fh = fit_fh(&obs, &f.design, &FhConfig { mcmc, ..Default::default() })?;
    let msmm = fit_msmm(&obs, &f.design, &f.basis, &MixtureConfig { mcmc, keep_assignments: true, ..Default::default() })?;

    println!("{} entries, r = {}, mean sampling variance {mean_d:.3}", obs.len(), f.basis.rank());
    println!("direct  AMSE {:.4}", amse(obs.z().as_slice(), &f.truth.z)?);
    for (name, draws) in [("fh", &fh), ("msm", &msm), ("msmm", &msmm.draws)] {
        let pred = predict_summaries(draws)?.mean;
        println!("{name:<7} AMSE {:.4}", amse(&pred, &f.truth.z)?);
    }
    if let Some(partition) = msmm.point_partition() {
        println!(
            "msmm modal clusters {:?}, Rand index vs generating split {:.3}",
            msmm.modal_clusters(),
            rand_index(&f.groups, &partition)?
        );
    }
    Ok(())
}
