"""CLI subcommands: exit codes, summary lines, end-to-end pipeline."""

from ssmdet.cli import main


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2


def test_missing_required_argument_exits_2():
    assert main(["gen-synthetic"]) == 2


def test_param_count_summary_line(capsys):
    assert main(["param-count", "--scale", "n"]) == 0
    out = capsys.readouterr().out
    assert "param-count scale=n params=" in out
    assert "flops=" in out


def test_check_shapes_ok(capsys):
    assert main(["check-shapes", "--input-size", "64"]) == 0
    out = capsys.readouterr().out.strip()
    assert "check-shapes ok=true" in out
    assert "grids=8x8,4x4,2x2" in out


def test_grad_check_single_block(capsys):
    assert main(["grad-check", "--block", "conv1d", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "grad-check blocks=1 failed=0" in out


def test_scan_bench_writes_csv(tmp_path, capsys):
    assert main(["scan-bench", "--lengths", "16,32", "--channels", "2",
                 "--states", "2", "--block-lens", "8", "--repeats", "1",
                 "--out", str(tmp_path)]) == 0
    csv = (tmp_path / "scan_bench.csv").read_text().strip().split("\n")
    assert csv[0].startswith("impl,")
    assert len(csv) == 1 + 2 * 2


def test_bad_config_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("input_size = 100\n")
    assert main(["param-count", "--config", str(cfg)]) == 1


def test_full_pipeline(tmp_path, capsys):
    data_dir = tmp_path / "data"
    run_dir = tmp_path / "run"
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(
        "scale = n\nwidth_override = 0.125\ninput_size = 64\n"
        "batch_size = 2\nepochs = 1\nnum_classes = 3\nseed = 0\n"
        f"out_dir = {run_dir}\n")

    assert main(["gen-synthetic", "--out", str(data_dir), "--count", "4",
                 "--image-size", "64", "--classes", "3", "--seed", "1"]) == 0
    assert main(["train-toy", "--config", str(cfg), "--data", str(data_dir)]) == 0
    assert (run_dir / "model.ckpt").exists()
    assert (run_dir / "metrics.txt").exists()

    image = data_dir / "images" / "img_00000.ppm"
    assert main(["infer", "--config", str(cfg), "--checkpoint", str(run_dir / "model.ckpt"),
                 "--images", str(image), "--conf", "0.0001", "--out", str(run_dir)]) == 0
    det_doc = run_dir / "detections.txt"
    assert det_doc.exists()

    out = capsys.readouterr().out
    assert "gen-synthetic images=4" in out
    assert "train-toy epochs=1" in out
    assert "infer images=1" in out


def test_eval_map_on_perfect_detections(tmp_path, capsys):
    from ssmdet import data as D
    from ssmdet.model import Detection

    data_dir = tmp_path / "data"
    annotated = D.gen_synthetic(3, 64, 3, seed=2, out_dir=data_dir)
    per_image = {
        ann.path: [Detection(box, 0.95, cls) for cls, box in ann.boxes]
        for ann in annotated
    }
    det_doc = tmp_path / "dets.txt"
    D.save_detections(per_image, det_doc)
    assert main(["eval-map", "--detections", str(det_doc),
                 "--annotations", str(data_dir / "annotations.txt")]) == 0
    out = capsys.readouterr().out
    assert "mAP50=1.0000" in out
    assert "recall=1.0000" in out


def test_infer_multithreaded_matches_single(tmp_path):
    from ssmdet import data as D

    data_dir = tmp_path / "data"
    run_dir_a, run_dir_b = tmp_path / "a", tmp_path / "b"
    D.gen_synthetic(3, 64, 3, seed=3, out_dir=data_dir)
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("scale = n\nwidth_override = 0.125\ninput_size = 64\n"
                   "epochs = 0\nbatch_size = 1\nnum_classes = 3\n"
                   f"out_dir = {run_dir_a}\n")
    assert main(["train-toy", "--config", str(cfg), "--data", str(data_dir)]) == 0
    images = [str(data_dir / "images" / f"img_{i:05d}.ppm") for i in range(3)]
    ckpt = str(run_dir_a / "model.ckpt")
    assert main(["infer", "--config", str(cfg), "--checkpoint", ckpt,
                 "--images", *images, "--conf", "0.001", "--out", str(run_dir_a)]) == 0
    assert main(["infer", "--config", str(cfg), "--checkpoint", ckpt,
                 "--images", *images, "--conf", "0.001", "--out", str(run_dir_b),
                 "--threads", "3"]) == 0
    assert (run_dir_a / "detections.txt").read_text() == \
        (run_dir_b / "detections.txt").read_text()
