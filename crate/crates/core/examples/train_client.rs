//! Trains one classifier per feature-skew client and shows how much accuracy
//! each loses on the other clients' contexts. Also prints the size of the
//! checkpoint a client would upload.
//!
//! cargo run --release --example train_client

use flmg::experiment::{make_data, train_clients};
use flmg::federation::accuracy;
use flmg::io::checkpoint::checkpoint_size;
use flmg::io::config::ExperimentConfig;

fn main() -> flmg::Result<()> {
    let cfg = ExperimentConfig::default();
    let data = make_data(&cfg)?;
    let updates = train_clients(&cfg, &data)?;
    println!(
        "{:<8}{:>10}{:>14}{:>12}{:>14}",
        "client", "own ctx", "other ctx", "params", "upload (B)"
    );
    for (k, u) in updates.iter().enumerate() {
        let own = accuracy(&u.model, &data.clients[k].test)?;
        let others: Vec<f64> = data
            .clients
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, c)| accuracy(&u.model, &c.test))
            .collect::<flmg::Result<_>>()?;
        let other = others.iter().sum::<f64>() / others.len() as f64;
        println!(
            "{k:<8}{:>10.1}{:>14.1}{:>12}{:>14}",
            100.0 * own,
            100.0 * other,
            u.upload_params(),
            checkpoint_size(&u.model)
        );
    }
    Ok(())
}
