"""Regenerates torch_conv_stack.onnx and torch_conv_stack.json.

A small Conv/ReLU/MaxPool stack ending in a classifier, exported with the
PyTorch ONNX exporter, plus reference features for a procedural image.
"""

import json
from pathlib import Path

import torch
from torch import nn

HERE = Path(__file__).parent
MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)


def image() -> torch.Tensor:
    y, x = torch.meshgrid(torch.arange(224), torch.arange(224), indexing="ij")
    chans = [(x * 7 + y * 13 + c * 29) % 256 for c in range(3)]
    return torch.stack(chans).unsqueeze(0).double() / 255.0


def main() -> None:
    torch.manual_seed(0)
    model = nn.Sequential(
        nn.Conv2d(3, 6, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(6, 512, (3, 2), padding=(1, 0), stride=(1, 1)),
        nn.ReLU(),
        nn.MaxPool2d((16, 15), stride=(16, 15)),
        nn.Flatten(),
        nn.Linear(7 * 7 * 512, 1),
    ).eval()
    path = HERE / "torch_conv_stack.onnx"
    dummy = torch.zeros(1, 3, 224, 224)
    torch.onnx.export(model, dummy, path, input_names=["input"], output_names=["logits"], dynamo=False)

    x = ((image() - MEAN.double()) / STD.double()).float()
    with torch.no_grad():
        feats = model[:6](x)
    hwc = feats[0].permute(1, 2, 0).reshape(-1).double()
    gen = torch.Generator().manual_seed(1)
    idx = torch.randperm(hwc.numel(), generator=gen)[:256].sort().values
    ref = {
        "shape": list(feats[0].permute(1, 2, 0).shape),
        "sum": hwc.sum().item(),
        "indices": idx.tolist(),
        "values": hwc[idx].tolist(),
    }
    (HERE / "torch_conv_stack.json").write_text(json.dumps(ref, indent=1) + "\n")


if __name__ == "__main__":
    main()
