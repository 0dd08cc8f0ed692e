use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};
use swan_core::config::MNIST_FILES;

use crate::commands::DATA_ENV;
use crate::Failure;

const MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

/// SHA-256 of the uncompressed canonical files, in `MNIST_FILES` order.
const SHA256: [&str; 4] = [
    "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
];

fn digest(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn download(dir: &Path, name: &str) -> Result<(), Failure> {
    let gz = dir.join(format!("{name}.gz"));
    let url = format!("{MIRROR}/{name}.gz");
    println!("downloading {url}");
    let ok = Command::new("curl").args(["-fsSL", "-o"]).arg(&gz).arg(&url).status().is_ok_and(|s| s.success());
    if !ok {
        return Err(Failure::new(2, format!("could not download {url}; place {name} in {} by hand", dir.display())));
    }
    let ok = Command::new("gunzip").arg("-f").arg(&gz).status().is_ok_and(|s| s.success());
    if !ok {
        return Err(Failure::new(2, format!("could not decompress {}", gz.display())));
    }
    Ok(())
}

pub fn fetch(dir: Option<PathBuf>, verify_only: bool) -> Result<(), Failure> {
    let dir = dir
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    fs::create_dir_all(&dir).map_err(|e| Failure::new(2, format!("cannot create {}: {e}", dir.display())))?;
    let mut bad = 0;
    for (name, want) in MNIST_FILES.iter().zip(SHA256) {
        let path = dir.join(name);
        if !path.is_file() {
            if verify_only {
                println!("missing  {}", path.display());
                bad += 1;
                continue;
            }
            download(&dir, name)?;
        }
        let got = digest(&path).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
        if got == want {
            println!("ok       {}", path.display());
        } else {
            println!("MISMATCH {} (sha256 {got})", path.display());
            bad += 1;
        }
    }
    if bad > 0 {
        return Err(Failure::new(2, format!("{bad} MNIST file(s) missing or corrupt in {}", dir.display())));
    }
    Ok(())
}
