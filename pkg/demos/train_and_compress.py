"""Train JetFormer-tiny on synthetic jets, then prune it and size a 1-bit build.

Run with ``python3 demos/train_and_compress.py``; takes about a minute.
"""

from jetforge import data as D
from jetforge import model as M
from jetforge import pruning as P
from jetforge import training as T
from jetforge.cost import COMPACT, cost_report
from jetforge.quantization import size_report


def main():
    records = D.synth_gen(seed=0, num_jets=5000, num_particles=8, num_features=3, num_classes=5)
    train, val = D.JetBatch.from_records(records, 8, 3).split(0.1, seed=0)
    stats = D.fit_norm_stats(train)
    train, val = D.normalize(train, stats), D.normalize(val, stats)

    config = M.ModelConfig(num_blocks=4, embed_dim=8, num_heads=2)
    print(cost_report(config, convention=COMPACT).table())

    state, history = T.train(M.build(config, seed=0), train, val, T.TrainConfig(epochs=25))
    print(f"\ntrained {len(history)} epochs, val accuracy {T.evaluate(state, val).accuracy:.4f}")

    pruned, report = P.prune_pipeline(state, train, val, P.PruneConfig())
    print("\nstructured pruning, 5 steps at global ratio 0.5")
    print(report.table())
    print("pruned widths:", report.after["widths"])

    sizes = size_report(M.ModelConfig(3, 64, 2))
    print(f"\n1-bit packed checkpoint: {sizes['packed_bytes']} bytes vs {sizes['full_bytes']} "
          f"({sizes['reduction_pct']:.2f}% smaller)")


if __name__ == "__main__":
    main()
