"""Command line tests: every subcommand runs in-process against temp dirs.

The scoring server subcommand is exercised once in a real subprocess; its
responses must match the in-process oracle bitwise.
"""

import csv
import json
import re
import subprocess
import sys

import numpy as np
import pytest

from vrise.archive import load_archive, save_archive
from vrise.classifier import RegionOracle
from vrise.cli import main, make_scorer, parse_image, parse_images
from vrise.experiments import ImageSource
from vrise.gridgen import GeneratorKind
from vrise.saliency import ParamSet
from vrise.wire import RemoteScorer

ORACLE_16 = "oracle:16x16:4,4,12,12"


def _png(tmp_path, name="scene.png"):
    from PIL import Image as PILImage

    raw = np.full((16, 16, 3), 40, dtype=np.uint8)
    raw[4:12, 4:12] = 230
    path = tmp_path / name
    PILImage.fromarray(raw).save(path)
    return path


# --------------------------------------------------------------------------
# spec parsing


def test_parse_image_oracle_spec():
    src = parse_image("oracle:24x16:2,2,8,8+10,4,20,12:classes=5")
    assert src.kind == "oracle"
    assert src.size == (24, 16)
    assert src.rects == ((2, 2, 8, 8), (10, 4, 20, 12))
    assert src.num_classes == 5
    assert src.image_id.startswith("oracle-24x16-")


@pytest.mark.parametrize(
    "text",
    [
        "oracle:16x16",  # no rectangles
        "oracle:16x16:1,2,3",  # rectangle needs four values
        "oracle:16x16:4,4,12,12:speed=5",  # unknown option
        "no-such-file.png",  # missing file
    ],
)
def test_parse_image_rejects(text):
    with pytest.raises(ValueError):
        parse_image(text)


def test_parse_image_file(tmp_path):
    path = _png(tmp_path)
    src = parse_image(str(path))
    assert src.kind == "file" and src.image_id == "scene" and src.path == str(path)


def test_parse_images_desk_and_lists():
    desk = parse_images("desk")
    assert [s.image_id for s in desk] == ["single-0", "few-0", "many-0"]
    both = parse_images(f"{ORACLE_16};oracle:8x8:1,1,4,4")
    assert len(both) == 2 and both[1].size == (8, 8)


def test_make_scorer_variants(tmp_path):
    assert make_scorer("oracle") is None  # sweeps build per-image oracles
    oracle_img = parse_image(ORACLE_16)
    assert isinstance(make_scorer("oracle", oracle_img), RegionOracle)

    file_img = parse_image(str(_png(tmp_path)))
    with pytest.raises(ValueError, match="no oracle"):
        make_scorer("oracle", file_img)

    remote = make_scorer("remote:127.0.0.1:9")
    assert isinstance(remote, RemoteScorer)
    with pytest.raises(ValueError):
        make_scorer("magic")


# --------------------------------------------------------------------------
# map generation and single-map evaluation commands


def _generate_args(out, **extra):
    args = [
        "generate",
        "--image",
        ORACLE_16,
        "--n-masks",
        "16",
        "--polygons",
        "9",
        "--sigma",
        "1.0",
        "--out",
        str(out),
    ]
    for key, value in extra.items():
        args += [f"--{key.replace('_', '-')}"] + ([] if value is None else [str(value)])
    return args


def _expected_params(**overrides):
    base = dict(
        n_masks=16,
        polygons=9,
        p1=0.5,
        master_seed=0,
        algorithm="vrise",
        sigma=1.0,
        meshcount=1,
        selector=GeneratorKind.threshold(),
    )
    base.update(overrides)
    return ParamSet(**base)


def test_generate_writes_archive_checkpoints_summary_figure(tmp_path, capsys):
    rc = main(_generate_args(tmp_path, checkpoints="8,16", figures=None))
    assert rc == 0
    digest = _expected_params().digest()
    out = capsys.readouterr().out
    assert f"map {digest}" in out and "class=0" in out and "masks=16" in out

    arch = tmp_path / "archives" / f"map_{digest}.vrse"
    assert arch.exists()
    for n in (8, 16):
        assert (tmp_path / "archives" / f"map_{digest}_ckpt{n}.vrse").exists()

    with open(tmp_path / "map_summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["class_id"] == 0 and summary["masks"] == 16
    assert summary["precision"] == "gen32-store32-game32"
    assert summary["archive"].endswith(f"map_{digest}.vrse")

    assert (tmp_path / "figures" / f"map_{digest}.png").exists()

    loaded = load_archive(arch)
    assert loaded.stored_dtype == "f32" and loaded.values.shape == (1, 16, 16)


def test_generate_fp16_storage(tmp_path):
    rc = main(_generate_args(tmp_path, precision="store=fp16"))
    assert rc == 0
    digest = _expected_params().digest()
    loaded = load_archive(tmp_path / "archives" / f"map_{digest}.vrse")
    assert loaded.stored_dtype == "f16"
    assert np.array_equal(
        loaded.values, loaded.values.astype(np.float16).astype(np.float32)
    )


@pytest.fixture()
def ramp_archive(tmp_path):
    sal = np.linspace(1.0, 0.0, 256, dtype=np.float32).reshape(16, 16)
    path = tmp_path / "ramp.vrse"
    save_archive(path, sal)
    return path


def test_altgame_curve_csv(tmp_path, capsys, ramp_archive):
    rc = main(
        [
            "altgame",
            "--map",
            str(ramp_archive),
            "--image",
            ORACLE_16,
            "--variant",
            "remove",
            "--step",
            "64",
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert re.search(r"remove auc=\d+\.\d{6} states=5", out)

    with open(tmp_path / "out" / "altgame_remove.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["pixels_altered"]) for r in rows] == [0, 64, 128, 192, 256]
    scores = [float(r["score"]) for r in rows]
    assert all(0.0 <= s <= 1.0 for s in scores)
    # the first state is untouched: it must equal the clean class-0 score
    assert scores[0] == pytest.approx(0.9, abs=1e-6)


def test_pointing_hit_and_miss(capsys, ramp_archive):
    rc = main(
        ["pointing", "--map", str(ramp_archive), "--image", ORACLE_16, "--boxes", "0,0,8,8"]
    )
    assert rc == 0 and "pointing hit" in capsys.readouterr().out

    rc = main(
        ["pointing", "--map", str(ramp_archive), "--image", ORACLE_16, "--boxes", "8,8,16,16"]
    )
    assert rc == 0 and "pointing miss" in capsys.readouterr().out


def test_pointing_without_boxes_fails_for_file_images(tmp_path, capsys, ramp_archive):
    png = _png(tmp_path)
    rc = main(["pointing", "--map", str(ramp_archive), "--image", str(png)])
    assert rc == 2
    assert "no target boxes" in capsys.readouterr().err


def test_consistency_counts_all_stored_maps(tmp_path, capsys):
    rng = np.random.default_rng(3)
    stack = rng.random((2, 16, 16), dtype=np.float32)
    single = rng.random((16, 16), dtype=np.float32)
    a, b = tmp_path / "a.vrse", tmp_path / "b.vrse"
    save_archive(a, stack)
    save_archive(b, single)

    rc = main(["consistency", "--maps", str(a), str(b), "--out", str(tmp_path / "out")])
    assert rc == 0
    assert "pairs=3" in capsys.readouterr().out
    with open(tmp_path / "out" / "consistency.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(r["pair_a"], r["pair_b"]) for r in rows] == [
        ("0", "1"),
        ("0", "2"),
        ("1", "2"),
    ]
    assert all(-1.0 <= float(r["ssim"]) <= 1.0 for r in rows)


# --------------------------------------------------------------------------
# experiment commands


def test_sweep_command(tmp_path, capsys):
    rc = main(
        [
            "sweep",
            "--images",
            ORACLE_16,
            "--polygons",
            "9",
            "--p1-values",
            "0.5",
            "--sigmas",
            "1.0",
            "--n-masks",
            "16",
            "--metrics",
            "altgame_remove,pointing",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    assert re.search(r"rows=2 errors=0", capsys.readouterr().out)
    assert (tmp_path / "results.csv").exists() and (tmp_path / "results.jsonl").exists()


def test_sigma_match_command(tmp_path, capsys):
    rc = main(
        [
            "sigma-match",
            "--sides",
            "3",
            "--sigmas",
            "0.5,2.0",
            "--p1-values",
            "0.5",
            "--samples",
            "1",
            "--area",
            "24x24",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "side=3 best sigma=" in out
    assert (tmp_path / "sigma_match.csv").exists()
    with open(tmp_path / "sigma_match_ranking.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert {r["sigma"] for r in rows} == {"0.5", "2.0"}
    assert {r["rank"] for r in rows} == {"1", "2"}


def test_fp16_ab_command(tmp_path, capsys):
    rc = main(
        [
            "fp16-ab",
            "--images",
            ORACLE_16,
            "--polygons",
            "9",
            "--sigma",
            "1.0",
            "--n-masks",
            "12",
            "--runs",
            "1",
            "--variants",
            "remove",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("within 5%") == 7  # every non-reference combo reports
    with open(tmp_path / "fp16_ab_summary.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 7
    assert (tmp_path / "fp16_ab.csv").exists()


def test_gridgen_study_command(tmp_path, capsys):
    rc = main(
        [
            "gridgen-study",
            "--image",
            ORACLE_16,
            "--side",
            "3",
            "--schedule",
            "8,16",
            "--maps",
            "2",
            "--n-reference",
            "16",
            "--sigma",
            "0",
            "--out",
            str(tmp_path),
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("guaranteed-baseline") == 2  # one line per budget
    with open(tmp_path / "guarantee.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert {r["group"] for r in rows} == {"baseline", "guaranteed", "difference"}


# --------------------------------------------------------------------------
# report rendering


@pytest.fixture(scope="module")
def full_results(tmp_path_factory):
    """One results directory fed by every experiment command."""
    out = tmp_path_factory.mktemp("results")
    common = ["--out", str(out)]
    assert (
        main(
            [
                "generate",
                "--image",
                ORACLE_16,
                "--n-masks",
                "32",
                "--polygons",
                "9",
                "--p1",
                "0.5",
                "--sigma",
                "1.0",
                *common,
            ]
        )
        == 0
    )
    archive = next((out / "archives").glob("map_*.vrse"))
    assert (
        main(
            [
                "altgame",
                "--map",
                str(archive),
                "--image",
                ORACLE_16,
                "--variant",
                "remove",
                "--step",
                "64",
                *common,
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "sweep",
                "--images",
                ORACLE_16,
                "--polygons",
                "9",
                "--p1-values",
                "0.5",
                "--sigmas",
                "1.0",
                "--n-masks",
                "16",
                "--runs",
                "2",
                "--metrics",
                "altgame_remove,pointing,convergence,consistency",
                "--checkpoints",
                "8,16",
                "--with-reference",
                *common,
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "sigma-match",
                "--sides",
                "3",
                "--sigmas",
                "0.5,2.0",
                "--p1-values",
                "0.5",
                "--samples",
                "1",
                "--area",
                "24x24",
                *common,
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "fp16-ab",
                "--images",
                ORACLE_16,
                "--polygons",
                "9",
                "--sigma",
                "1.0",
                "--n-masks",
                "12",
                "--runs",
                "1",
                "--variants",
                "remove",
                *common,
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "gridgen-study",
                "--image",
                ORACLE_16,
                "--side",
                "3",
                "--schedule",
                "8,16",
                "--maps",
                "2",
                "--n-reference",
                "16",
                "--sigma",
                "0",
                *common,
            ]
        )
        == 0
    )
    return out


def test_report_renders_figures_from_results(full_results, capsys):
    rc = main(["report", "--out", str(full_results)])
    assert rc == 0
    printed = capsys.readouterr().out.strip().splitlines()
    figures = full_results / "figures"
    expected = [
        "alteration_games.png",
        "sweep_altgame_remove.png",
        "sweep_pointing.png",
        "sweep_improvement.png",
        "sweep_convergence.png",
        "sigma_matching.png",
        "fp16_ab.png",
        "guarantee_ssim_to_reference.png",
        "guarantee_intra_consistency.png",
    ]
    for name in expected:
        path = figures / name
        assert path.exists(), name
        assert path.stat().st_size > 0
        assert str(path) in printed


def test_report_on_empty_directory_fails(tmp_path, capsys):
    rc = main(["report", "--out", str(tmp_path)])
    assert rc == 1
    assert "no renderable results" in capsys.readouterr().err


# --------------------------------------------------------------------------
# error handling and the served oracle


def test_value_errors_exit_2(tmp_path, capsys):
    assert main(["generate", "--image", "oracle:16x16", "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err

    missing = tmp_path / "gone.vrse"
    rc = main(
        ["altgame", "--map", str(missing), "--image", ORACLE_16, "--variant", "remove",
         "--out", str(tmp_path)]
    )
    assert rc == 2


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_serve_oracle_subprocess_matches_local_oracle():
    proc = subprocess.Popen(
        [
            sys.executable,
            "-m",
            "vrise.cli",
            "serve-oracle",
            "--rects",
            "4,4,12,12",
            "--area",
            "16x16",
            "--classes",
            "3",
            "--listen",
            "127.0.0.1:0",
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        line = proc.stdout.readline()
        assert "serving oracle" in line, proc.stderr.read()
        port = int(re.findall(r"\d+", line)[-1])

        src = ImageSource(image_id="t", size=(16, 16), rects=((4, 4, 12, 12),))
        local = src.make_scorer()
        batch = np.stack([src.load()[:, :, None], np.zeros((16, 16, 1), np.float32)])

        remote = RemoteScorer("127.0.0.1", port)
        try:
            assert remote.num_classes == 3
            got = remote.score_batch(batch)
        finally:
            remote.close()
        assert np.array_equal(got, local.score_batch(batch))
    finally:
        proc.terminate()
        proc.wait(timeout=10)
