//! End-to-end checks of the `roiterp` binary.

use std::path::Path;
use std::process::{Command, Output};

fn roiterp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roiterp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--override",
    "mode=baseline",
    "--override",
    "epochs=1",
    "--override",
    "batch_size=2",
    "--override",
    "crop=0",
    "--override",
    "flow.levels=3",
    "--override",
    "flow.base_channels=8",
    "--override",
    "synthesis.hidden=[4, 4]",
    "--override",
    "synthesis.kernel=3",
    "--override",
    "features.out_channels=4",
    "--override",
    "features.layers=1",
];

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(roiterp(&["--help"]).status.code(), Some(0));
    assert_eq!(roiterp(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        roiterp(&["train", "--override", "train.mode=sideways"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        roiterp(&["train", "--override", "layers=3"]).status.code(),
        Some(1)
    );
}

#[test]
fn synthetic_train_interpolate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = roiterp(&[
        "make-synthetic",
        "--out",
        p(&data),
        "--override",
        "count=2",
        "--override",
        "height=32",
        "--override",
        "width=32",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // indexing the fresh dataset raises no warnings
    assert!(!String::from_utf8_lossy(&out.stderr).contains("WARN"));

    let run = dir.path().join("run");
    let mut args = vec!["train", "--output", p(&run), "--seed", "3", "--override"];
    let root = format!("data.root={}", p(&data.join("frames")));
    args.push(&root);
    args.extend_from_slice(TINY);
    let out = roiterp(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        !String::from_utf8_lossy(&out.stderr).contains("WARN"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = run.join("checkpoints").join("epoch_0001.ckpt");
    assert!(ckpt.is_file());
    let resolved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 3"));

    let (pred, gt, masks) = (
        dir.path().join("pred"),
        dir.path().join("gt"),
        dir.path().join("masks"),
    );
    for clip in ["clip_0000", "clip_0001"] {
        let src = data.join("frames").join(clip);
        std::fs::create_dir_all(gt.join(clip)).unwrap();
        std::fs::copy(src.join("frame_1.png"), gt.join(clip).join("frame_1.png")).unwrap();
        let dump = dir.path().join("dump").join(clip);
        let out = roiterp(&[
            "interpolate",
            "--checkpoint",
            p(&ckpt),
            "--frame1",
            p(&src.join("frame_0.png")),
            "--frame2",
            p(&src.join("frame_2.png")),
            "--out",
            p(&pred.join(clip).join("frame_1.png")),
            "--dump-dir",
            p(&dump),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        for f in ["warped.png", "mask.png", "flows.ckpt"] {
            assert!(dump.join(f).is_file(), "{f}");
        }
        // every pixel of the center square counts as object
        std::fs::create_dir_all(masks.join(clip)).unwrap();
        let m = image::GrayImage::from_fn(32, 32, |x, y| {
            image::Luma([if (8..24).contains(&x) && (8..24).contains(&y) {
                255
            } else {
                0
            }])
        });
        m.save(masks.join(clip).join("frame_1.png")).unwrap();
    }

    let table = dir.path().join("metrics.csv");
    let out = roiterp(&[
        "evaluate",
        "--pred",
        p(&pred),
        "--gt",
        p(&gt),
        "--masks",
        p(&masks),
        "--trimap-widths",
        "2,4",
        "--out",
        p(&table),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "frame,width,ie,psnr,ssim,n_pixels");
    assert!(lines.iter().any(|l| l.starts_with("mean,4,")));
    assert!(lines.iter().any(|l| l.starts_with("mean,full,")));

    // ground truth against itself scores perfectly
    let out = roiterp(&[
        "evaluate",
        "--pred",
        p(&gt),
        "--gt",
        p(&gt),
        "--out",
        p(&table),
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&table).unwrap();
    let mean = csv.lines().find(|l| l.starts_with("mean,full,")).unwrap();
    let cols: Vec<&str> = mean.split(',').collect();
    assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(cols[4].parse::<f64>().unwrap(), 1.0);

    std::fs::remove_file(pred.join("clip_0001").join("frame_1.png")).unwrap();
    let out = roiterp(&[
        "evaluate",
        "--pred",
        p(&pred),
        "--gt",
        p(&gt),
        "--out",
        p(&table),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no prediction"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.png");
    let out = roiterp(&[
        "interpolate",
        "--checkpoint",
        p(&dir.path().join("none.ckpt")),
        "--frame1",
        p(&f),
        "--frame2",
        p(&f),
        "--out",
        p(&f),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
