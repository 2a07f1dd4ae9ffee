import csv
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from kgnn.cli import main
from kgnn.kgstore import DatasetSplit, Vocab, build_graph
from kgnn.synthetic import write_dataset

ROOT = os.path.join(os.path.dirname(__file__), os.pardir)
CONFIGS = os.path.join(ROOT, "configs")


def write_conf(path, text):
    path.write_text(text)
    return str(path)


def tiny_conf(tmp_path, extra="", name="run.conf"):
    base = open(os.path.join(CONFIGS, "tiny.conf")).read()
    return write_conf(tmp_path / name, base + f"\noutput.dir = {tmp_path / 'out'}\n" + extra)


def cli(*argv):
    return subprocess.run([sys.executable, "-m", "kgnn.cli", *argv], capture_output=True, text=True, timeout=600)


def test_prepare_is_idempotent(tmp_path, capsys):
    d = str(tmp_path / "data")
    assert main(["prepare", d, "--synthetic", "tiny"]) == 0
    first = capsys.readouterr().out
    assert "12 entities, 4 relations" in first
    assert os.path.exists(os.path.join(d, "graph.cache"))
    assert main(["prepare", d]) == 0
    assert "up-to-date" in capsys.readouterr().out
    # editing an input invalidates the cache
    with open(os.path.join(d, "test.txt"), "a") as fh:
        fh.write("ada\tspouse\tcal\n")
    assert main(["prepare", d]) == 0
    assert "up-to-date" not in capsys.readouterr().out


def test_prepare_reports_corrupt_line(tmp_path, capsys):
    d = tmp_path / "data"
    d.mkdir()
    (d / "train.txt").write_text("a\tr\tb\nb\tr\tc\nbroken line\n")
    assert main(["prepare", str(d)]) == 1
    assert "train.txt:3" in capsys.readouterr().err


def test_prepare_missing_directory(tmp_path):
    assert main(["prepare", str(tmp_path / "none")]) == 1


def test_config_errors_exit_2(tmp_path, capsys):
    conf = tiny_conf(tmp_path, "train.bogus = 1\n")
    assert main(["train", "--config", conf]) == 2
    assert "train.bogus" in capsys.readouterr().err
    conf = tiny_conf(tmp_path, "train.lr = -3\n")
    assert main(["train", "--config", conf]) == 2
    assert "train.lr" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.conf")]) == 2


def test_nan_abort_exit_3(tmp_path, capsys):
    # squared L2 distances overflow once the relation rows explode
    conf = tiny_conf(tmp_path, "train.lr = 1e200\ntrain.epochs = 5\ntrain.norm = L2\n")
    with np.errstate(all="ignore"):
        assert main(["train", "--config", conf]) == 3
    assert "aborted" in capsys.readouterr().err


def test_zero_epochs_writes_init_checkpoint(tmp_path):
    conf = tiny_conf(tmp_path, "train.epochs = 0\n")
    assert main(["train", "--config", conf]) == 0
    out = tmp_path / "out"
    assert (out / "checkpoints" / "epoch_0000.ckpt").exists()
    assert (out / "config.txt").exists()
    assert main(["eval", "--config", conf]) == 0


def test_effective_config_reloads_identically(tmp_path):
    conf = tiny_conf(tmp_path, "train.epochs = 0\n")
    assert main(["train", "--config", conf, "--seed", "4"]) == 0
    echoed = tmp_path / "out" / "config.txt"
    from kgnn.config import RunConfig
    cfg = RunConfig.load(str(echoed))
    assert cfg["train.seed"] == 4 and cfg == RunConfig.load(conf, {"train.seed": "4"})


def test_tiny_training_final_loss_and_determinism(tmp_path, capsys):
    conf = tiny_conf(tmp_path)
    assert main(["train", "--config", conf]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch ")]
    assert len(lines) == 200
    assert float(lines[-1].split()[3]) < 0.05
    assert main(["train", "--config", conf, "--out", str(tmp_path / "again")]) == 0

    def losses(path):
        with open(path) as fh:
            return [(r["epoch"], r["loss"], r["active_pairs"]) for r in csv.DictReader(fh)]

    assert losses(tmp_path / "out" / "epochs.csv") == losses(tmp_path / "again" / "epochs.csv")


def test_eval_bad_checkpoints_exit_4(tmp_path):
    conf = tiny_conf(tmp_path)
    assert main(["eval", "--config", conf]) == 4
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE\x01\x00\x00\x00")
    assert main(["eval", "--config", conf, "--checkpoint", str(bad)]) == 4
    bad.write_bytes(b"KGNN\x09\x00\x00\x00")
    assert main(["eval", "--config", conf, "--checkpoint", str(bad)]) == 4
    # a checkpoint from a different model size does not fit
    other = tiny_conf(tmp_path, "train.epochs = 0\nencoder.dim = 8\n", name="small.conf")
    assert main(["train", "--config", other, "--out", str(tmp_path / "small")]) == 0
    assert main(["eval", "--config", conf, "--checkpoint",
                 str(tmp_path / "small" / "checkpoints" / "epoch_0000.ckpt")]) == 4


def test_untrained_model_ranks_at_chance(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 100
    t = np.unique(np.stack([rng.integers(0, n, 1200), rng.integers(0, 3, 1200), rng.integers(0, n, 1200)], 1), axis=0)
    rng.shuffle(t)
    g = build_graph(DatasetSplit(t[300:], test=t[:300]), Vocab([f"e{i}" for i in range(n)]),
                    Vocab(["a", "b", "c"]))
    write_dataset(g, tmp_path / "toy")
    conf = write_conf(tmp_path / "toy.conf", f"data.dir = {tmp_path / 'toy'}\nencoder.kind = lookup\n"
                      f"encoder.dim = 16\ntrain.epochs = 0\noutput.dir = {tmp_path / 'out'}\n")
    assert main(["train", "--config", conf]) == 0
    assert main(["eval", "--config", conf, "--mode", "raw"]) == 0
    with open(tmp_path / "out" / "ranking_test.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["side"] == "both" and r["k"] == "10"]
    assert rows[0]["mode"] == "raw"
    assert abs(float(rows[0]["hit_ratio"]) - 0.1) < 0.05
    assert (tmp_path / "out" / "classification_test.csv").exists()


def test_sweep_workers_writes_reports(tmp_path):
    conf = tiny_conf(tmp_path, "train.epochs = 2\n")
    assert main(["sweep-workers", "--config", conf, "--values", "1,2"]) == 0
    out = tmp_path / "out"
    with open(out / "sweep_workers.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["setting"] for r in rows] == ["1", "2"]
    assert (out / "workers_2" / "config.txt").exists()
    assert (out / "plot" / "workers_hr10.csv").exists()


def test_config_command(tmp_path, capsys):
    assert main(["config"]) == 0
    assert "train.lr" in capsys.readouterr().out
    assert main(["config", "--config", tiny_conf(tmp_path), "--seed", "3"]) == 0
    assert "train.seed = 3" in capsys.readouterr().out


def wait_for(path, timeout=60):
    deadline = time.time() + timeout
    while not os.path.exists(path):
        if time.time() > deadline:
            raise TimeoutError(path)
        time.sleep(0.05)
    return open(path).read().strip()


def test_serve_two_workers_over_tcp(tmp_path):
    conf = tiny_conf(tmp_path, "train.epochs = 2\nruntime.workers = 2\nruntime.shards = 2\n")
    shards = [subprocess.Popen([sys.executable, "-m", "kgnn.cli", "serve", "shard", "--config", conf,
                                "--shard-id", str(i), "--shards", "2", "--port-file", str(tmp_path / f"p{i}")],
                               stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True) for i in range(2)]
    try:
        endpoints = ",".join(wait_for(str(tmp_path / f"p{i}")) for i in range(2))
        workers = [subprocess.Popen([sys.executable, "-m", "kgnn.cli", "serve", "worker", "--config", conf,
                                     "--endpoints", endpoints, "--worker-id", str(w)],
                                    stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True) for w in range(2)]
        coord = cli("serve", "coordinator", "--config", conf, "--endpoints", endpoints)
        assert coord.returncode == 0, coord.stderr
        assert "trained 2 epochs" in coord.stdout
        for w in workers:
            out, err = w.communicate(timeout=120)
            assert w.returncode == 0, err
            assert "epoch 2" in out
        for s in shards:
            s.wait(timeout=60)
            assert s.returncode == 0
    finally:
        for p in shards:
            if p.poll() is None:
                p.kill()
    assert (tmp_path / "out" / "checkpoints" / "epoch_0002.ckpt").exists()
    assert main(["eval", "--config", conf]) == 0


@pytest.mark.slow
def test_sweep_hops_peaks_at_two(tmp_path):
    base = open(os.path.join(CONFIGS, "compositional_hops.conf")).read()
    conf = write_conf(tmp_path / "c.conf", base + f"\noutput.dir = {tmp_path / 'out'}\n")
    assert main(["sweep-hops", "--config", conf]) == 0
    with open(tmp_path / "out" / "sweep_hops.csv") as fh:
        rows = list(csv.DictReader(fh))
    hr = {int(r["setting"]): float(r["hr10"]) for r in rows}
    print("hop sweep HR@10:", hr)
    assert sorted(hr) == [1, 2, 3, 4]
    assert max(hr, key=hr.get) == 2
