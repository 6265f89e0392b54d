"""End-to-end command behavior through the argparse entry point.

Everything runs in-process via main(argv) against small synthetic
datasets at the native frame sizes, so these are the slowest tests in
the suite; fixtures share one prepared dataset and one pair of briefly
trained weight files.
"""

import os

import numpy as np
import pytest

from sketchgen.cli import main
from sketchgen.imageio import read_pgm, write_label_map, write_pgm


def make_inputs(root, n=2, identical=True, labels=True, seed=0):
    """Write a manifest of full-size photo/sketch[/label] files."""
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        base = rng.uniform(0.2, 0.8, size=(1, 250, 200))
        photo = np.clip(base + rng.normal(0, 0.05, size=base.shape), 0, 1)
        # identical pairs align perfectly; the scaled variant crushes
        # edge magnitudes so every structural pair fails the filter
        sketch = photo if identical else np.clip(0.3 * photo + 0.4, 0, 1)
        write_pgm(os.path.join(root, f"photo{i}.pgm"), photo)
        write_pgm(os.path.join(root, f"sketch{i}.pgm"), sketch)
        fields = [f"photo{i}.pgm", f"sketch{i}.pgm"]
        if labels:
            lab = np.full((250, 200), 3)
            lab[60:220, 40:160] = 1
            lab[20:80, 30:170] = 2
            write_label_map(os.path.join(root, f"labels{i}.pgm"), lab)
            fields.append(f"labels{i}.pgm")
        lines.append("\t".join(fields))
    manifest = os.path.join(root, "set.tsv")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def tree_bytes(root):
    """Relative path -> file bytes for a whole directory tree."""
    snapshot = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            full = os.path.join(dirpath, name)
            snapshot[os.path.relpath(full, root)] = open(full, "rb").read()
    return snapshot


def csv_without_seconds(path):
    rows = open(path).read().splitlines()
    return [",".join(r.split(",")[:-1]) for r in rows]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One prepared dataset plus briefly trained weights for reuse."""
    root = tmp_path_factory.mktemp("cli")
    manifest = make_inputs(str(root))
    dataset = str(root / "data")
    assert main(["prepare", manifest, dataset, "--seed", "0"]) == 0
    bfcn_w = str(root / "bfcn.skwt")
    pnet_w = str(root / "pnet.skwt")
    assert main(["train", "bfcn", dataset, "--epochs", "1", "--seed", "0",
                 "--out", bfcn_w, "--report", str(root / "b.csv")]) == 0
    assert main(["train", "pnet", dataset, "--epochs", "1", "--seed", "0",
                 "--out", pnet_w, "--report", str(root / "p.csv")]) == 0
    return {
        "root": str(root),
        "manifest": manifest,
        "dataset": dataset,
        "bfcn": bfcn_w,
        "pnet": pnet_w,
        "photo": os.path.join(str(root), "photo0.pgm"),
    }


class TestPrepare:
    def test_archive_layout(self, workspace):
        ds = workspace["dataset"]
        assert os.path.exists(os.path.join(ds, "prior_sketch.pgm"))
        assert os.path.exists(os.path.join(ds, "prior_parsing.ppm"))
        rows = [l for l in open(os.path.join(ds, "pairs.tsv"))
                if not l.startswith("#")]
        assert len(rows) > 0
        for row in rows:
            photo, sketch, region, score, kept, y, x, frame = row.split("\t")
            assert os.path.exists(os.path.join(ds, photo))
            assert os.path.exists(os.path.join(ds, sketch))
            assert region in ("1", "2")
            assert kept == "1"  # identical pairs score exactly 1.0

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        other = str(tmp_path / "data2")
        assert main(["prepare", workspace["manifest"], other, "--seed", "0"]) == 0
        assert tree_bytes(other) == tree_bytes(workspace["dataset"])

    def test_threshold_above_max_warns(self, tmp_path, capsys):
        manifest = make_inputs(str(tmp_path))
        code = main(["prepare", manifest, str(tmp_path / "d"),
                     "--ssim-threshold", "1.01", "--seed", "0"])
        out = capsys.readouterr().out
        assert code == 0  # hair pairs survive; only structural are dropped
        assert "warning" in out
        assert "1.01" in out

    def test_zero_surviving_pairs_is_an_error(self, tmp_path, capsys):
        # no labels -> every patch is structural; impossible threshold
        manifest = make_inputs(str(tmp_path), labels=False)
        code = main(["prepare", manifest, str(tmp_path / "d"),
                     "--ssim-threshold", "1.01", "--seed", "0"])
        assert code == 1
        assert "zero pairs" in capsys.readouterr().err

    def test_unreadable_manifest_is_an_error(self, tmp_path):
        assert main(["prepare", str(tmp_path / "missing.tsv"),
                     str(tmp_path / "d")]) == 1


class TestTrain:
    def test_one_epoch_writes_one_csv_row(self, workspace, tmp_path):
        report = str(tmp_path / "r.csv")
        code = main(["train", "pnet", workspace["dataset"], "--epochs", "1",
                     "--seed", "0", "--out", str(tmp_path / "w.skwt"),
                     "--report", report])
        assert code == 0
        rows = open(report).read().splitlines()
        assert len(rows) == 2  # header + 1 epoch
        loss_p = float(rows[1].split(",")[4])
        assert loss_p == pytest.approx(np.log(3.0), abs=0.05)

    def test_seeded_rerun_reproduces_weights_and_csv(self, workspace, tmp_path):
        outs = []
        for tag in ("a", "b"):
            w = str(tmp_path / f"{tag}.skwt")
            r = str(tmp_path / f"{tag}.csv")
            assert main(["train", "bfcn", workspace["dataset"], "--epochs", "1",
                         "--seed", "3", "--out", w, "--report", r]) == 0
            outs.append((w, r))
        assert open(outs[0][0], "rb").read() == open(outs[1][0], "rb").read()
        # wall-clock seconds differ between runs by design; all else matches
        assert csv_without_seconds(outs[0][1]) == csv_without_seconds(outs[1][1])

    def test_no_drl_equals_explicit_beta_zero_when_nothing_filtered(
            self, workspace, tmp_path):
        # every pair in this dataset passes the filter, so the two runs
        # see the same pair list and must produce identical weights
        a, b = str(tmp_path / "a.skwt"), str(tmp_path / "b.skwt")
        assert main(["train", "bfcn", workspace["dataset"], "--epochs", "1",
                     "--seed", "0", "--no-drl", "--out", a,
                     "--report", str(tmp_path / "a.csv")]) == 0
        assert main(["train", "bfcn", workspace["dataset"], "--epochs", "1",
                     "--seed", "0", "--beta", "0", "--out", b,
                     "--report", str(tmp_path / "b.csv")]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()
        assert (csv_without_seconds(str(tmp_path / "a.csv"))
                == csv_without_seconds(str(tmp_path / "b.csv")))

    def test_filtered_out_faces_need_no_drl(self, tmp_path):
        # scaled sketches fail the alignment filter for every face pair
        manifest = make_inputs(str(tmp_path), identical=False)
        dataset = str(tmp_path / "d")
        assert main(["prepare", manifest, dataset, "--seed", "0"]) == 0
        code = main(["train", "bfcn", dataset, "--epochs", "1", "--seed", "0",
                     "--out", str(tmp_path / "w.skwt"),
                     "--report", str(tmp_path / "r.csv")])
        assert code == 1  # no face pairs survive filtering
        code = main(["train", "bfcn", dataset, "--epochs", "1", "--seed", "0",
                     "--no-drl", "--out", str(tmp_path / "w.skwt"),
                     "--report", str(tmp_path / "r.csv")])
        assert code == 0

    def test_no_prior_changes_training(self, workspace, tmp_path):
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        assert main(["train", "pnet", workspace["dataset"], "--epochs", "1",
                     "--seed", "0", "--out", str(tmp_path / "a.skwt"),
                     "--report", a]) == 0
        assert main(["train", "pnet", workspace["dataset"], "--epochs", "1",
                     "--seed", "0", "--no-prior",
                     "--out", str(tmp_path / "b.skwt"), "--report", b]) == 0
        assert csv_without_seconds(a) != csv_without_seconds(b)

    def test_missing_dataset_is_an_error(self, tmp_path, capsys):
        assert main(["train", "bfcn", str(tmp_path / "nope"),
                     "--epochs", "1"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_pnet_needs_labeled_frames(self, tmp_path):
        manifest = make_inputs(str(tmp_path), labels=False)
        dataset = str(tmp_path / "d")
        assert main(["prepare", manifest, dataset, "--seed", "0"]) == 0
        assert main(["train", "pnet", dataset, "--epochs", "1"]) == 1

    def test_config_file_supplies_epochs_flags_win(self, workspace, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[sketchgen]\nepochs = 2\nseed = 0\n")
        r1 = str(tmp_path / "r1.csv")
        assert main(["train", "pnet", workspace["dataset"], "--config", str(cfg),
                     "--out", str(tmp_path / "w1.skwt"), "--report", r1]) == 0
        assert len(open(r1).read().splitlines()) == 3  # header + 2 epochs
        r2 = str(tmp_path / "r2.csv")
        assert main(["train", "pnet", workspace["dataset"], "--config", str(cfg),
                     "--epochs", "1", "--out", str(tmp_path / "w2.skwt"),
                     "--report", r2]) == 0
        assert len(open(r2).read().splitlines()) == 2

    def test_unknown_config_key_is_an_error(self, workspace, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[sketchgen]\nlearning_rate = 5\n")
        assert main(["train", "pnet", workspace["dataset"],
                     "--config", str(cfg)]) == 1


class TestInfer:
    def run(self, workspace, out, *extra):
        return main(["infer", workspace["photo"], "--bfcn", workspace["bfcn"],
                     "--pnet", workspace["pnet"], "--prior", workspace["dataset"],
                     "--out", out, *extra])

    def test_writes_all_intermediates_at_contract_size(self, workspace, tmp_path):
        out = str(tmp_path / "out")
        assert self.run(workspace, out) == 0
        for name in ("structural", "textural", "fused", "parsing"):
            img = read_pgm(os.path.join(out, f"{name}.pgm"))
            assert img.shape == (1, 238, 188)

    def test_rerun_is_bitwise_identical(self, workspace, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert self.run(workspace, a) == 0
        assert self.run(workspace, b) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_hard_fusion_flag(self, workspace, tmp_path):
        out = str(tmp_path / "out")
        assert self.run(workspace, out, "--hard-fusion") == 0
        assert os.path.exists(os.path.join(out, "fused.pgm"))

    def test_no_prior_runs(self, workspace, tmp_path):
        out = str(tmp_path / "out")
        assert main(["infer", workspace["photo"], "--bfcn", workspace["bfcn"],
                     "--pnet", workspace["pnet"], "--no-prior",
                     "--out", out]) == 0

    def test_wrong_weight_file_is_an_error(self, workspace, tmp_path, capsys):
        # parsing weights offered as generation weights: spec hash differs
        code = main(["infer", workspace["photo"], "--bfcn", workspace["pnet"],
                     "--pnet", workspace["pnet"], "--out", str(tmp_path / "o")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestBenchTrunk:
    def test_reports_and_passes(self, workspace, capsys):
        code = main(["bench-trunk", workspace["photo"],
                     "--bfcn", workspace["bfcn"], "--reps", "2"])
        out = capsys.readouterr().out
        assert code == 0
        assert "shared_ms" in out
        assert "outputs bitwise equal" in out

    def test_single_repetition_table(self, workspace, capsys):
        assert main(["bench-trunk", workspace["photo"],
                     "--bfcn", workspace["bfcn"], "--reps", "1"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines()
                 if l.strip().startswith("1 ")]
        assert len(lines) == 1


class TestGradcheckCommand:
    def test_pass_exits_zero(self, capsys):
        assert main(["gradcheck", "mse"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_unknown_target_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "batchnorm"])
        assert exc.value.code == 2

    def test_bad_epsilon_is_contract_error(self):
        assert main(["gradcheck", "mse", "--epsilon", "0.5"]) == 1


class TestEvalCms:
    def build_dirs(self, root, n=5):
        rng = np.random.default_rng(5)
        q, g = os.path.join(root, "q"), os.path.join(root, "g")
        os.makedirs(q)
        os.makedirs(g)
        for i in range(n):
            img = rng.uniform(size=(1, 20, 16))
            write_pgm(os.path.join(g, f"id{i}.pgm"), img)
            noisy = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)
            write_pgm(os.path.join(q, f"id{i}.pgm"), noisy)
        return q, g

    def test_near_duplicates_rank_first(self, tmp_path, capsys):
        q, g = self.build_dirs(str(tmp_path))
        out = str(tmp_path / "cms.csv")
        code = main(["eval-cms", q, g, "--k", "3", "--max-rank", "5",
                     "--out", out])
        assert code == 0
        assert "Rank-1: 1.0000" in capsys.readouterr().out
        rows = open(out).read().splitlines()
        assert rows[0] == "rank,score"
        assert len(rows) == 6

    def test_oversized_k_is_capped_with_note(self, tmp_path, capsys):
        q, g = self.build_dirs(str(tmp_path))
        assert main(["eval-cms", q, g, "--max-rank", "3",
                     "--out", str(tmp_path / "c.csv")]) == 0
        assert "reducing k" in capsys.readouterr().out  # default k=100 > 4

    def test_identity_mismatch_listed(self, tmp_path, capsys):
        q, g = self.build_dirs(str(tmp_path))
        os.rename(os.path.join(q, "id4.pgm"), os.path.join(q, "stranger.pgm"))
        code = main(["eval-cms", q, g, "--out", str(tmp_path / "c.csv")])
        assert code == 1
        assert "stranger" in capsys.readouterr().err

    def test_empty_dir_is_an_error(self, tmp_path):
        q, g = self.build_dirs(str(tmp_path))
        empty = str(tmp_path / "empty")
        os.makedirs(empty)
        assert main(["eval-cms", empty, g, "--out", str(tmp_path / "c.csv")]) == 1


class TestUsage:
    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["transmogrify"])
        assert exc.value.code == 2

    def test_unknown_network_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "vae", "somewhere"])
        assert exc.value.code == 2
