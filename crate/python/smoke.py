"""End-to-end smoke run of the native module: synth data, two-stage
training, save/load, inference and evaluation."""

import sys
import tempfile
from pathlib import Path

import vqa_native as vqa

CONFIG = '{"n_frames": 2, "crop": 16, "patch": 8, "dim": 24, "heads": 2, "blocks": 1, "epochs": 2, "batch": 2}'


def main():
    y = vqa.encode_mos(2.0)
    print("encode(2.0):", " ".join(f"{p:.4f}" for p in y))
    assert vqa.vr_loss(y, y) == 0.0

    flops = vqa.estimate_flops()
    for hw in [(540, 960), (720, 1280), (1080, 1920)]:
        assert vqa.estimate_flops(source=hw) == flops
    print(f"default video MACs: {flops['total']:,}")

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        manifest = vqa.make_synth(str(d / "data"), count=8, frames=4, height=24, width=24)
        image = vqa.Model.train(manifest, CONFIG, mode="image")
        video = vqa.Model.train(manifest, CONFIG, init=image)
        ckpt = d / "model.ckpt"
        video.save(str(ckpt))
        model = vqa.Model.load(str(ckpt))
        print("stage:", model.stage, "epochs:", model.epoch)
        pred = model.infer(str(d / "data" / "v000.svqv"), dataset="synth0")
        print(pred, "crops:", [round(c, 4) for c in pred.crop_scores])
        for row in model.evaluate(manifest, split="all"):
            print("eval:", row)
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
