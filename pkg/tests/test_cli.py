import json
import shutil

import pytest

from smokerecon.cli import main

TINY = ["--set", "grid.nx=16", "--set", "grid.ny=28", "--set", "grid.nz=16", "--set", "scene.frames=5",
        "--threads", "1"]


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["nosuch"])
    assert exc.value.code == 1
    assert main(["simulate", "--set", "grid.bogus=1", "--out", str(tmp_path)]) == 1
    assert main(["simulate", *TINY]) == 1  # --out missing
    assert main(["bench", *TINY, "--instances", "0", "--out", str(tmp_path)]) == 1
    assert main(["evaluate", "--ref", str(tmp_path), "--test", str(tmp_path)]) == 1


def test_runtime_errors(tmp_path):
    assert main(["render", "--volumes", str(tmp_path), "--cameras", str(tmp_path / "none.ini"),
                 "--out", str(tmp_path / "o")]) == 2


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    root = tmp_path_factory.mktemp("staged")
    truth, images, recon = root / "truth", root / "images", root / "recon"
    cams = str(truth / "cameras.ini")
    assert main(["simulate", *TINY, "--seed", "0", "--out", str(truth)]) == 0
    assert main(["render", *TINY, "--volumes", str(truth), "--cameras", cams, "--out", str(images)]) == 0
    assert main(["reconstruct", *TINY, "--images", str(images), "--cameras", cams, "--out", str(recon)]) == 0
    assert main(["evaluate", "--ref", str(truth), "--test", str(recon), "--ref-images", str(images),
                 "--test-images", str(recon / "render"), "--out", str(root)]) == 0
    return root


def _files(root, patterns):
    return {p.relative_to(root): p.read_bytes() for pat in patterns for p in sorted(root.glob(pat))}


def test_stages_compose_into_bench(staged, tmp_path):
    bench = tmp_path / "bench"
    assert main(["bench", *TINY, "--instances", "1", "--out", str(bench)]) == 0
    inst = bench / "instance_0"
    patterns = ["truth/*.vol", "truth/*.ini", "images/*.pfm", "recon/*.vol", "recon/render/*.pfm", "*.tsv"]
    a, b = _files(staged, patterns), _files(inst, patterns)
    assert a.keys() == b.keys() and len(a) > 20
    assert all(a[k] == b[k] for k in a)
    assert (bench / "summary.tsv").exists()


def test_evaluate_identical_is_inf(staged, capsys):
    truth = str(staged / "truth")
    assert main(["evaluate", "--ref", truth, "--test", truth]) == 0
    out = capsys.readouterr().out.split()
    assert out == ["density", "inf", "velocity", "inf"]


def test_resume_matches_uninterrupted(staged, tmp_path):
    recon = tmp_path / "recon"
    shutil.copytree(staged / "recon", recon)
    # drop the last two frames and rewind the manifest to a partial run
    manifest = json.loads((recon / "manifest.json").read_text())
    manifest["frames"] = 3
    manifest["diagnostics"] = manifest["diagnostics"][:3]
    (recon / "manifest.json").write_text(json.dumps(manifest))
    for t in (3, 4):
        for p in recon.glob(f"frame_{t:04d}_*.vol"):
            p.unlink()
    cams = str(staged / "truth" / "cameras.ini")
    assert main(["reconstruct", *TINY, "--images", str(staged / "images"), "--cameras", cams,
                 "--out", str(recon), "--resume"]) == 0
    a, b = _files(staged / "recon", ["*.vol"]), _files(recon, ["*.vol"])
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)


def test_tomo_subcommand(staged, tmp_path):
    out = tmp_path / "tomo.vol"
    cams = str(staged / "truth" / "cameras.ini")
    assert main(["tomo", *TINY, "--images", str(staged / "images"), "--cameras", cams, "--frame", "4",
                 "--out", str(out)]) == 0
    assert out.stat().st_size > 0
    assert main(["tomo", *TINY, "--images", str(staged / "images"), "--cameras", cams, "--frame", "9",
                 "--out", str(out)]) == 1
