//! KV-cache budget of latent layers on a Llama-3.2-1B-shaped model.
//!
//! cargo run --example kv_report

use mla_upcycle::cli::{kv_report, render_kv_report, CliError, ReportGeometry};
use mla_upcycle::model::LayerSelection;
use mla_upcycle::upcycle::RankSpec;

fn main() -> Result<(), CliError> {
    let geo = ReportGeometry::llama_3_2_1b();
    let specs: Vec<RankSpec> = [512, 256, 128, 64, 48]
        .into_iter()
        .map(|r_kv| RankSpec::Fixed { r_q: 864, r_kv })
        .collect();
    let mut out = std::io::stdout().lock();

    let rows = kv_report(&geo, &specs, &LayerSelection::All, 2048)?;
    render_kv_report(&rows, &geo, &mut out)?;

    println!();
    let half: LayerSelection = "1,3,5,7,8,10,12,14".parse()?;
    let rows = kv_report(&geo, &specs[..1], &half, 2048)?;
    render_kv_report(&rows, &geo, &mut out)?;
    Ok(())
}
