//! End-to-end runs of the binary: artifacts, idempotence and exit codes.

use std::process::Command;

fn cipherlab(args: &[&str], dir: &std::path::Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cipherlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("CIPHERLAB_SEED")
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

#[test]
fn taint_mitigate_run_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cipherlab(&["fixtures", "--out", "fx"], d).0, 0);
    assert_eq!(
        cipherlab(
            &[
                "taint",
                "fx/ladder-bitscan.mir",
                "--runs",
                "3",
                "-o",
                "sites.json"
            ],
            d
        )
        .0,
        0
    );
    let sites: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sites.json")).unwrap()).unwrap();
    assert!(!sites["stores"].as_array().unwrap().is_empty());

    let args = [
        "mitigate",
        "fx/ladder-bitscan.mir",
        "--strategy",
        "mask",
        "--variant",
        "rdrand",
        "--sites",
        "sites.json",
        "--mir-out",
        "m.mir",
        "-o",
        "map.json",
    ];
    assert_eq!(cipherlab(&args, d).0, 0);
    let first = std::fs::read_to_string(d.join("m.mir")).unwrap();
    assert_eq!(cipherlab(&args, d).0, 0);
    assert_eq!(
        std::fs::read_to_string(d.join("m.mir")).unwrap(),
        first,
        "mitigate is idempotent"
    );

    let inputs = "fx/ladder-bitscan.inputs.json";
    let (c1, plain) = cipherlab(&["run", "fx/ladder-bitscan.mir", "--inputs", inputs], d);
    let (c2, masked) = cipherlab(
        &["run", "m.mir", "--inputs", inputs, "--map", "map.json"],
        d,
    );
    assert_eq!((c1, c2), (0, 0));
    let out = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap()[0]["output"].clone();
    assert_eq!(out(&plain), out(&masked));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        cipherlab(&["mitigate", "mask-micro", "--strategy", "mask"], d).0,
        2
    );
    assert_eq!(cipherlab(&["taint", "no-such-thing"], d).0, 2);
    let (code, _) = cipherlab(&["verify", "mask-micro", "--strategy", "obfuscate"], d);
    assert_eq!(code, 0);
    // The parity-aware attacker still reads odd cells in place.
    let (code, text) = cipherlab(
        &[
            "attack",
            "ct-swap",
            "--strategy",
            "obfuscate",
            "--runs",
            "1",
            "--expect-defeat",
        ],
        d,
    );
    assert_eq!(code, 4, "{text}");
}
