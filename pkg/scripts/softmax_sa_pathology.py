"""Train sigmoid-SA and softmax-SA side by side on the overfit task.

Softmax spatial weights sum to 1, so each weight averages 1/(H*W) and the
attended features shrink by that factor; the loss stalls near its start.
"""

import argparse

from densattn.attention import AttentionConfig, sa_weights
from densattn.density import KernelSpec
from densattn.model import ModelConfig, build
from densattn.synthetic import SyntheticSpec, synthetic_samples
from densattn.tensor import Tensor
from densattn.train import TrainConfig, train_loop

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--every", type=int, default=20)
    args = p.parse_args()

    samples = synthetic_samples(SyntheticSpec(n_images=5, height=args.size, width=args.size,
                                              count_bins=((1, 10),), seed=0), KernelSpec.fixed(2.0))
    cfg = TrainConfig(lr=1e-3, momentum=0.9, weight_decay=0.0, epochs=args.epochs, augment=False,
                      record_wall_time=False)
    logs, models = {}, {}
    for act in ("sigmoid", "softmax"):
        models[act] = build(ModelConfig(init="he", attention=AttentionConfig("SA", sa_activation=act)))
        logs[act] = train_loop(models[act], samples, cfg)

    print(f"{'epoch':>6}{'sigmoid loss':>16}{'softmax loss':>16}")
    for i in list(range(0, args.epochs, args.every)) + [args.epochs - 1]:
        print(f"{i:>6}{logs['sigmoid'].rows[i]['loss']:>16.4g}{logs['softmax'].rows[i]['loss']:>16.4g}")
    ratio = logs["softmax"].final_loss / logs["sigmoid"].final_loss
    print(f"final loss ratio softmax/sigmoid: {ratio:.3g}")

    feats = models["softmax"].slot_input(Tensor(samples[0].image[None]))
    w = sa_weights(feats, "softmax").data
    hw = w.shape[2] * w.shape[3]
    print(f"softmax weights at the slot: sum {w.sum():.15f}, mean {w.mean():.6g} vs 1/(H*W) = {1 / hw:.6g}")
