//! Saves a freshly built model, loads it back and re-saves it.

use calm::checkpoint::{load, save, MANIFEST_FILE, PARAMS_FILE};
use calm::model::{CalmModel, ModelConfig};

fn main() -> calm::error::Result<()> {
    let dir = std::env::temp_dir().join(format!("calm-checkpoint-{}", std::process::id()));
    let cfg = ModelConfig::desk();
    let (_, params) = CalmModel::build(&cfg, 7)?;
    let first = save(&dir.join("a"), &cfg, &params, 7, None, None)?;
    let ck = load(&dir.join("a"))?;
    save(&dir.join("b"), &ck.manifest.model, &ck.params, ck.manifest.seed, None, None)?;
    println!("{} tensors, {} values, blob sha256 {}", first.params.len(), first.numel, first.params_sha256);
    for f in [PARAMS_FILE, MANIFEST_FILE] {
        let same = std::fs::read(dir.join("a").join(f))? == std::fs::read(dir.join("b").join(f))?;
        println!("{f} identical after round trip: {same}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
