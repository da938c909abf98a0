//! Embeds a fingerprint of the library source into the build. The acceptance
//! suite keys its trained-model cache on it so stale results can never be
//! reused after a code change.

use std::fs;
use std::path::Path;

fn hash_bytes(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x100000001b3);
    }
}

fn walk(dir: &Path, files: &mut Vec<std::path::PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            walk(&path, files);
        } else if path.extension().map(|e| e == "rs").unwrap_or(false) {
            files.push(path);
        }
    }
}

fn main() {
    println!("cargo:rerun-if-changed=src");
    let mut files = Vec::new();
    walk(Path::new("src"), &mut files);
    files.sort();
    let mut h = 0xcbf29ce484222325u64;
    for f in &files {
        hash_bytes(&mut h, f.to_string_lossy().as_bytes());
        if let Ok(bytes) = fs::read(f) {
            hash_bytes(&mut h, &bytes);
        }
    }
    println!("cargo:rustc-env=RECOVER_SRC_FINGERPRINT={h:016x}");
}
