import json

import numpy as np
import pytest

from lamap.cli import UsageError, grayscale_pgm, main, pick_bands
from lamap.dsp import MultichannelAudio, write_wav
from lamap.geometry import unit_vector
from lamap.lam import load_checkpoint

SMALL = {"geometry": "tetra", "tessellation": {"n_points": 64},
         "csm": {"n_bands": 3, "frames_per_csm": 4},
         "simulate": {"duration": 0.5},
         "train": {"learning_rate": 1e-3, "max_epochs": 3, "batch_size": 8}}


def _run(tmp, *argv, cfg=SMALL, out=None):
    path = tmp / "cfg.json"
    path.write_text(json.dumps(cfg))
    return main(["--config", str(path), "--out", str(out or tmp / "out"), *argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert _run(tmp, "simulate", "--n-scenes", "6", out=tmp / "data") == 0
    return tmp


def _truth_csv(path, frames):
    rows = ["frame_index,source_id,azimuth_deg,elevation_deg"]
    rows += [f"{f},0,{az},{el}" for f, (az, el) in enumerate(frames)]
    path.write_text("\n".join(rows) + "\n")


def _est_csv(path, frames):
    rows = ["frame_index,azimuth_deg,elevation_deg,weight"]
    rows += [f"{f},{az},{el},1.0" for f, (az, el) in enumerate(frames) if az is not None]
    path.write_text("\n".join(rows) + "\n")


def test_eval_formatting(tmp_path, capsys):
    _truth_csv(tmp_path / "t.csv", [(10, 20), (30, 0)])
    _est_csv(tmp_path / "e.csv", [(10, 20), (30, 0)])
    assert _run(tmp_path, "eval", "--estimates", str(tmp_path / "e.csv"),
                "--truth", str(tmp_path / "t.csv")) == 0
    assert capsys.readouterr().out.strip() == "LE 0.00 LR 100.0"
    _est_csv(tmp_path / "e.csv", [(15, 0), (None, None)])
    _truth_csv(tmp_path / "t.csv", [(10, 0), (30, 0)])
    assert _run(tmp_path, "eval", "--estimates", str(tmp_path / "e.csv"),
                "--truth", str(tmp_path / "t.csv")) == 0
    assert capsys.readouterr().out.strip() == "LE 5.00 LR 50.0"
    report = json.loads((tmp_path / "out" / "eval.json").read_text())
    assert report["display"] == "LE 5.00 LR 50.0"


def test_eval_frame_misalignment(tmp_path):
    _truth_csv(tmp_path / "t.csv", [(0, 0)])
    _est_csv(tmp_path / "e.csv", [(0, 0), (0, 0), (0, 0)])
    assert _run(tmp_path, "eval", "--estimates", str(tmp_path / "e.csv"),
                "--truth", str(tmp_path / "t.csv")) == 2


def test_exit_codes(tmp_path):
    assert _run(tmp_path, "train", "--manifest", str(tmp_path / "missing.json")) == 3
    assert _run(tmp_path, "simulate", "--n-scenes", "1", cfg={"geometry": "nope"}) == 2
    assert _run(tmp_path, "simulate", "--n-scenes", "1", cfg={"train": {"lr": 1}}) == 2
    assert _run(tmp_path, "simulate", "--n-scenes", "0", cfg=SMALL) == 2
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_train_one_band_and_doae(dataset, tmp_path):
    out = tmp_path / "o"
    assert _run(dataset, "train", "--manifest", str(dataset / "data" / "manifest.json"),
                "--bands", "1", out=out) == 0
    model = load_checkpoint(out / "model.lamm")
    assert model.n_bands == 1
    lines = (out / "train_report.csv").read_text().splitlines()
    assert lines[0] == "epoch,band,train_loss,val_loss"
    scene = dataset / "data" / "scene_0000"
    assert _run(dataset, "doae", "--checkpoint", str(out / "model.lamm"), "--csm",
                f"{scene}.lamc", "--truth", f"{scene}.csv", out=out) == 0
    assert _run(dataset, "eval", "--estimates", str(out / "estimates.csv"), "--truth",
                f"{scene}.csv", out=out) == 0


def test_map_deterministic_and_brightest_pixel(dataset, tmp_path):
    scene = dataset / "data" / "scene_0001"
    blobs = []
    for i in range(2):
        out = tmp_path / f"m{i}"
        assert _run(dataset, "map", "--method", "das", "--csm", f"{scene}.lamc",
                    "--window", "2", out=out) == 0
        blobs.append({p.name: p.read_bytes() for p in sorted(out.glob("map*"))})
    assert blobs[0] == blobs[1]
    names = sorted(blobs[0])
    assert "map.csv" in names and "map_sum.pgm" in names and len(names) == 1 + 3 + 1
    # brightest pixel of the summed image sits at the node with the largest summed value
    rows = [r.split(",") for r in blobs[0]["map.csv"].decode().splitlines()[1:]]
    best = max(rows, key=lambda r: float(r[-1]))
    az, el = float(best[1]), float(best[2])
    pgm = blobs[0]["map_sum.pgm"]
    header, pix = pgm.split(b"\n", 3)[:3], pgm.split(b"\n", 3)[3]
    w, h = map(int, header[1].split())
    img = np.frombuffer(pix, np.uint8).reshape(h, w)
    r, c = np.unravel_index(np.argmax(img), img.shape)
    cell = unit_vector(-180 + (c + 0.5) * 360 / w, 90 - (r + 0.5) * 180 / h)
    assert np.degrees(np.arccos(np.clip(cell @ unit_vector(az, el), -1, 1))) < 40


def test_doae_on_silence_is_empty(tmp_path):
    write_wav(MultichannelAudio(np.zeros((4, 24000)), 48000.0), tmp_path / "quiet.wav")
    out = tmp_path / "out"
    assert _run(tmp_path, "csm", "--audio", str(tmp_path / "quiet.wav")) == 0
    assert _run(tmp_path, "doae", "--method", "das", "--csm", str(out / "quiet.lamc")) == 0
    lines = (out / "estimates.csv").read_text().splitlines()
    assert lines == ["frame_index,azimuth_deg,elevation_deg,weight"]


def test_check_grads_runs(tmp_path, capsys):
    assert _run(tmp_path, "check-grads", "--pairs", "2") == 0
    assert "2/2 pairs passed" in capsys.readouterr().out


def test_pick_bands():
    assert pick_bands(9, None, None) is None
    assert pick_bands(9, 2, None) == [0, 8]
    assert len(pick_bands(9, 1, None)) == 1
    assert pick_bands(9, None, "1,3") == [1, 3]
    with pytest.raises(UsageError):
        pick_bands(9, None, "12")


def test_grayscale_pgm():
    data = grayscale_pgm(np.array([[0.0, 1.0], [0.5, 0.25]]))
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[-4:]) == [0, 255, 128, 64]
