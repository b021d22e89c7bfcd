//! Regenerates the canonical scenario files:
//! `cargo run -p crowdnav --example write_scenarios -- scenarios`

use std::path::PathBuf;

use crowdnav::planner::PlannerKind;
use crowdnav::scenario::Scenario;

fn main() -> crowdnav::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenarios".into()));
    std::fs::create_dir_all(&dir)?;
    for n in [2, 6, 10] {
        let sc = Scenario::random(0, n, PlannerKind::Ours)?;
        let path = dir.join(format!("crowd_{n}.toml"));
        sc.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}
