"""Smoke test for the `decipher` Python extension.

Build the module first, for example with
    maturin develop -m crates/py/Cargo.toml --release
or
    cargo build --release -p decipher-py --features extension-module
    cp target/release/libdecipher.so python/decipher.so
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import decipher

TINY = """
seed = 3
image_size = 16
channels = 1
patch_size = 8
stride = 4
output_dir = "{out}"

[schedule]
steps = 8
beta_start = 0.001
beta_end = 0.3

[denoiser]
patch_size = 8
image_channels = 1
base_channels = 4
channel_mults = [1, 2]
time_embed_dim = 4
norm_groups = 2
max_steps = 3

[refiner]
image_size = 16
image_channels = 1
stem_channels = 2
unet_channels = [2, 2, 2]
content_channels = [2, 2, 2]
style_dim = 4
key_dim = 2
ffn_hidden = 4
time_embed_dim = 2
norm_groups = 1
batch_size = 2
max_steps = 2

[classifier]
image_size = 16
image_channels = 1
input_size = 8
widths = [4, 4, 4]
epochs = 2
accuracy_bar = 0.0

[data]
test_fraction = 0.2

[data.source]
kind = "synthetic"
categories = 5
variants = 2
styles = 2
seed = 1
image_size = 16
channels = 1
"""


def check_schedule():
    s = decipher.NoiseSchedule()
    assert s.steps == 1000
    g = s.gammas()
    assert all(b < a for a, b in zip(g, g[1:]))
    assert abs(s.gamma(10) - s.gamma(9) * s.alpha(10)) < 1e-12
    x = s.forward_sample([0.5, -0.5], 1000, [0.0, 0.0])
    assert abs(x[0] - 0.5 * math.sqrt(s.gamma(1000))) < 1e-12
    try:
        s.gamma(0)
    except ValueError:
        pass
    else:
        raise AssertionError("t = 0 accepted")


def check_layout():
    layout = decipher.PatchLayout(128, 128, 64, 16)
    assert len(layout) == 25
    assert layout.coverage(64, 64) == 16
    assert layout.origins()[1] == (0, 16)
    assert decipher.offset_loss([(3.0, 4.0)]) == 5.0


def check_config():
    c = decipher.RunConfig.desk()
    back = decipher.RunConfig.from_toml(c.to_toml())
    assert back.digest() == c.digest()
    assert (c.image_size, c.patch_size, c.stride) == (128, 64, 16)
    try:
        decipher.RunConfig.from_toml("stride = 24\n")
    except ValueError:
        pass
    else:
        raise AssertionError("bad stride accepted")


def check_pipeline(tmp):
    run = os.path.join(tmp, "run")
    cfg = decipher.RunConfig.from_toml(TINY.format(out=run))
    corpus = os.path.join(tmp, "corpus")
    d1 = decipher.synth_data(corpus, categories=5, variants=2, styles=2, image_size=16, channels=1, seed=1)
    d2 = decipher.synth_data(os.path.join(tmp, "again"), categories=5, variants=2, styles=2, image_size=16, channels=1, seed=1)
    assert d1 == d2
    assert decipher.train_initial(cfg, "lss") == 3
    assert decipher.train_refiner(cfg) == 2
    held_in, canonical = decipher.train_recognizer(cfg)
    assert 0.0 <= canonical <= 1.0 and 0.0 <= held_in <= 1.0

    cond_dir = os.path.join(corpus, "c0000", "condition")
    cond = os.path.join(cond_dir, sorted(os.listdir(cond_dir))[0])
    p = decipher.Pipeline(cfg, "lss", refine=True)
    a = p.decipher(cond, 7)
    assert len(a) == 16 and len(a[0]) == 16
    assert a == p.decipher(cond, 7)
    out = os.path.join(tmp, "out.png")
    p.decipher_to(cond, out, 7)
    clf = decipher.Classifier.load(os.path.join(run, "classifier"))
    ranked = clf.rank(out, top=3)
    assert len(ranked) == 3 and abs(sum(q for _, q in clf.rank(out, top=5)) - 1.0) < 1e-4
    try:
        decipher.Pipeline(cfg, "whole")
    except RuntimeError:
        pass
    else:
        raise AssertionError("missing whole-image model accepted")


def main():
    check_schedule()
    check_layout()
    check_config()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(tmp)
    report = os.environ.get("DECIPHER_ABLATION_REPORT")
    if report and os.path.exists(report):
        r = decipher.AblationReport.load(report)
        print(r.table(), end="")
        for name, passed, detail in r.checks():
            print("pass" if passed else "FAIL", name, detail)
    print("smoke test ok")


if __name__ == "__main__":
    main()
