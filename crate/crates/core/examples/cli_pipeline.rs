//! The five CLI subcommands run in sequence on a throwaway dataset, through
//! the same entry point the binary uses.

use uwbright::cli;
use uwbright::synth::underwater_scene;

fn main() -> uwbright::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let raw = root.join("raw");
    std::fs::create_dir_all(&raw).expect("mkdir");
    for i in 0..4 {
        underwater_scene(48, 48, i).save_png(&raw.join(format!("dive{i}.png")))?;
    }
    let config = root.join("toy.toml");
    std::fs::write(
        &config,
        "image_size = 32\nbatch_size = 2\nepochs = 2\nddim_steps = 5\n\
         [denoiser]\nbase_channels = 8\nchannel_multipliers = [1, 2]\ntime_embed_dim = 16\n\
         brightness_embed_dim = 8\nnorm_groups = 4\n",
    )
    .expect("write config");

    let p = |s: &std::path::Path| s.to_string_lossy().into_owned();
    let (cfg, data, run) = (p(&config), p(&root.join("triples")), p(&root.join("run")));
    let ckpt = p(&root.join("run/checkpoint_epoch0002.uwb"));
    let steps: Vec<Vec<String>> = vec![
        vec!["preprocess".into(), "--input".into(), p(&raw), "--out".into(), data.clone()],
        vec!["train".into(), "--data".into(), data.clone(), "--out".into(), run.clone()],
        vec!["enhance".into(), "--checkpoint".into(), ckpt, "--input".into(), p(&raw), "--out".into(), p(&root.join("enh"))],
        vec!["evaluate".into(), "--pred".into(), p(&root.join("enh")), "--ref".into(), p(&raw), "--out".into(), p(&root.join("report.json"))],
        vec!["plot".into(), "--log".into(), p(&root.join("run/train_log.jsonl")), "--report".into(), p(&root.join("report.json")), "--out".into(), p(&root.join("plots"))],
    ];
    for args in steps {
        let argv: Vec<String> = ["uwbright", "--config", &cfg, "--seed", "3"]
            .into_iter()
            .map(String::from)
            .chain(args.iter().cloned())
            .collect();
        println!("$ {}", argv[5..].join(" "));
        let code = cli::run(argv);
        assert_eq!(code, 0, "{} failed", args[0]);
    }
    Ok(())
}
