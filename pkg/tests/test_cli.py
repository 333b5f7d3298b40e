import json
import subprocess
import sys

import numpy as np
import pytest

from splitseg.analysis import CostReport
from splitseg.cli import main
from splitseg.codec import quantize
from splitseg.images import load_image, load_segmap, save_image
from splitseg.models import DecoderConfig
from splitseg.pipeline import SplitModel
from splitseg.tensor import load_tensor, save_tensor
from splitseg.transport import SegServer

SMALL = ["--dim", "8", "--classes", "5", "--seed", "11"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv)
    assert code == 0, err
    return json.loads(out)


@pytest.fixture
def image(tmp_path, rng):
    path = tmp_path / "img.ppm"
    save_image(path, rng.random((3, 64, 64), dtype=np.float32))
    return path


def test_build_and_inspect(capsys, tmp_path):
    w = tmp_path / "m.ssjd"
    built = run_json(capsys, "build", *SMALL, "--out", str(w))
    info = run_json(capsys, "inspect", "--weights", str(w))
    assert info["config"]["d"] == 8 and info["config"]["num_classes"] == 5
    assert info["model_id"] == built["model_id"]
    assert info["trainable_params"] == built["params"]


def test_analyze_reports_and_files(capsys, tmp_path):
    prefix = tmp_path / "rep"
    rec = run_json(capsys, "analyze", "--res", "1024x2048", "--classes", "19", "--out", str(prefix))
    back = CostReport.from_json((tmp_path / "rep.json").read_text())
    assert CostReport.from_csv((tmp_path / "rep.csv").read_text()) == back
    assert back.macs == rec["macs"] and back.params == rec["params"]
    assert 170 < rec["gflops"] < 230


def test_analyze_dim_32(capsys):
    rec = run_json(capsys, "analyze", "--res", "512x512", "--dim", "32", "--scope", "cloud")
    assert rec["mparams"] == pytest.approx(0.033, abs=0.005)


def test_analyze_decoder_comparison(capsys, tmp_path):
    rows = run_json(capsys, "analyze", "--res", "1024x2048", "--classes", "19", "--compare",
                    "--out", str(tmp_path / "cmp"))
    assert rows[0]["gflops"] / rows[1]["gflops"] >= 20
    assert (tmp_path / "cmp.csv").read_text().startswith("model,resolution,gflops,mparams")
    assert len(json.loads((tmp_path / "cmp.json").read_text())) == 2


def test_analyze_rejects_bad_resolution(capsys):
    assert run(capsys, "analyze", "--res", "500x512")[0] == 2
    assert run(capsys, "analyze", "--res", "banana")[0] == 2


@pytest.mark.parametrize("seed", range(5))
def test_roundtrip_verifies(capsys, seed):
    rec = run_json(capsys, "roundtrip", "--dim", "16", "--seed", str(seed), "--shape", "6x5")
    assert rec["lossless"] and rec["rate_within_bound"]
    assert rec["bytes"] == rec["header_bytes"] + rec["payload_bytes"]


def test_encode_decode_files(capsys, tmp_path, rng):
    r = (rng.standard_normal((8, 3, 4)) * 3).astype(np.float32)
    save_tensor(tmp_path / "r.sstn", r)
    run_json(capsys, "encode", *SMALL, "--in", str(tmp_path / "r.sstn"), "--out", str(tmp_path / "r.ssbs"))
    run_json(capsys, "decode", *SMALL, "--in", str(tmp_path / "r.ssbs"), "--out", str(tmp_path / "q.sstn"))
    np.testing.assert_array_equal(load_tensor(tmp_path / "q.sstn"), quantize(r))


def test_corrupted_stream_exits_protocol(capsys, tmp_path):
    path = tmp_path / "s.ssbs"
    run_json(capsys, "encode", *SMALL, "--out", str(path))
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    code, _, err = run(capsys, "decode", *SMALL, "--in", str(path), "--out", str(tmp_path / "x"))
    assert code == 4 and "version" in err


def test_decode_with_wrong_model_exits_protocol(capsys, tmp_path):
    path = tmp_path / "s.ssbs"
    run_json(capsys, "encode", *SMALL, "--out", str(path))
    code, _, err = run(capsys, "decode", "--dim", "8", "--classes", "5", "--seed", "12",
                       "--in", str(path), "--out", str(tmp_path / "x"))
    assert code == 4 and "model_id" in err


def test_missing_input_exits_io(capsys, tmp_path):
    code, _, err = run(capsys, "decode", "--in", str(tmp_path / "none"), "--out", str(tmp_path / "x"))
    assert code == 3
    assert run(capsys, "segment", "--topology", "in-car-jd", "--image", str(tmp_path / "none.ppm"))[0] == 3


def test_segment_in_car(capsys, tmp_path, image):
    out, stats = tmp_path / "m.ssmp", tmp_path / "s.json"
    rec = run_json(capsys, "segment", *SMALL, "--topology", "in-car-jd", "--image", str(image),
                   "--out", str(out), "--stats", str(stats))
    assert rec["bytes_sent"] == 0 and rec["bpp"] == 0.0
    assert load_segmap(out).shape == (64, 64)
    assert json.loads(stats.read_text())["bytes_sent"] == 0


def test_segment_rejects_bad_image_size(capsys, tmp_path, rng):
    path = tmp_path / "odd.ppm"
    save_image(path, rng.random((3, 40, 64), dtype=np.float32))
    code, _, err = run(capsys, "segment", *SMALL, "--topology", "in-car-jd", "--image", str(path),
                       "--out", str(tmp_path / "m.ssmp"))
    assert code == 2 and "32" in err


def test_segment_distributed_loopback(capsys, tmp_path, image):
    model = SplitModel.build(DecoderConfig.joint(d=8, num_classes=5), seed=11)
    out = tmp_path / "m.ssmp"
    with SegServer(model) as srv:
        addr = "%s:%d" % srv.address
        rec = run_json(capsys, "segment", *SMALL, "--topology", "distributed-jd", "--image", str(image),
                       "--addr", addr, "--out", str(out))
        payload = run_json(capsys, "segment", *SMALL, "--topology", "distributed-jd", "--image", str(image),
                           "--addr", addr, "--out", str(out), "--payload-only")
    np.testing.assert_array_equal(load_segmap(out), model.distributed(load_image(image))[2])
    assert rec["bpp"] == 8 * rec["bytes_sent"] / 4096
    assert payload["bpp"] == 8 * payload["payload_bytes"] / 4096 < rec["bpp"]


def test_segment_address_from_environment(capsys, tmp_path, image, monkeypatch):
    model = SplitModel.build(DecoderConfig.joint(d=8, num_classes=5), seed=11)
    with SegServer(model) as srv:
        monkeypatch.setenv("SPLITSEG_ADDR", "%s:%d" % srv.address)
        rec = run_json(capsys, "segment", *SMALL, "--topology", "distributed-jd", "--image", str(image),
                       "--out", str(tmp_path / "m.ssmp"))
    assert rec["bytes_sent"] > 0


def test_segment_invalid_address(capsys, tmp_path, image):
    code, _, err = run(capsys, "segment", *SMALL, "--topology", "distributed-jd", "--image", str(image),
                       "--addr", "nowhere", "--out", str(tmp_path / "m.ssmp"))
    assert code == 2


def test_seed_from_environment(capsys, tmp_path, monkeypatch):
    explicit = run_json(capsys, "build", "--dim", "8", "--seed", "7", "--out", str(tmp_path / "a"))
    monkeypatch.setenv("SPLITSEG_SEED", "7")
    from_env = run_json(capsys, "build", "--dim", "8", "--out", str(tmp_path / "b"))
    assert explicit["model_id"] == from_env["model_id"]
    monkeypatch.setenv("SPLITSEG_SEED", "seven")
    assert run(capsys, "build", "--dim", "8", "--out", str(tmp_path / "c"))[0] == 2


def test_config_file_with_overrides(capsys, tmp_path):
    cfg = tmp_path / "jd.cfg"
    cfg.write_text("# joint decoder\nvariant = jd\nd = 16\nchannels = 16\nnum_classes = 7\n")
    info = run_json(capsys, "inspect", "--config", str(cfg), "--classes", "9")
    assert info["config"]["d"] == 16 and info["config"]["num_classes"] == 9
    cfg.write_text("d = 16\nchannels = 8\n")
    assert run(capsys, "inspect", "--config", str(cfg))[0] == 2
    cfg.write_text("wings = 2\n")
    assert run(capsys, "inspect", "--config", str(cfg))[0] == 2


def test_bench_single_iteration(capsys):
    code, out, _ = run(capsys, "bench", *SMALL, "--res", "64x64", "--iters", "1")
    assert code == 0
    (line,) = out.strip().splitlines()
    assert json.loads(line)["bytes"] == 0


def test_usage_errors(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "bench", "--variant", "d", "--topology", "in-car-jd", "--res", "64x64")[0] == 2


def test_serve_subprocess(tmp_path, image):
    proc = subprocess.Popen(
        [sys.executable, "-m", "splitseg.cli", "serve", *SMALL, "--addr", "127.0.0.1:0"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("serving ") and " on 127.0.0.1:" in line
        addr = line.split(" on ")[1].strip()
        out = tmp_path / "m.ssmp"
        res = subprocess.run(
            [sys.executable, "-m", "splitseg.cli", "segment", *SMALL, "--topology", "distributed-jd",
             "--image", str(image), "--addr", addr, "--out", str(out)],
            capture_output=True, text=True, timeout=60)
        assert res.returncode == 0, res.stderr
        model = SplitModel.build(DecoderConfig.joint(d=8, num_classes=5), seed=11)
        np.testing.assert_array_equal(load_segmap(out), model.distributed(load_image(image))[2])
    finally:
        proc.terminate()
        proc.wait(timeout=10)
