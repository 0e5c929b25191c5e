"""
Model cost and the pre-training gate
====================================

Counts parameters and multiply-accumulates for a few PhytNet shapes and the
ResNet18 reference, then applies the 2M parameter / 6 GFLOP budget.
"""
from phytnet import arch
from phytnet.sweep import constraint_gate, gate_verdict

shapes = {
    "minimal": arch.ModelConfig(stem_channels=16, stage_channels=[16], blocks_per_stage=[1], groups=4),
    "two stages, SE": arch.ModelConfig(stage_channels=[32, 64], blocks_per_stage=[2, 2], use_se=True,
                                       input_size=285),
    "wide, k=9": arch.ModelConfig(stem_channels=64, stage_channels=[128] * 4, blocks_per_stage=[4] * 4,
                                  mid_kernel=9, groups=8, input_size=400),
}

for name, cfg in shapes.items():
    v = constraint_gate(cfg)
    print(f"{name:<16} {v.n_params:>10,} params {v.gflops:8.3f} GFLOPS @ {cfg.input_size}  "
          f"{'pass' if v.passed else 'terminate ' + '+'.join(v.reasons)}")

resnet = arch.build_resnet18_reference(4)
rep = arch.cost_report(resnet, 408)
v = gate_verdict(rep.n_params, rep.gflops)
print(f"{'resnet18':<16} {rep.n_params:>10,} params {rep.gflops:8.3f} GFLOPS @ 408  terminate {'+'.join(v.reasons)}")

# a 1x1 conv is the cheapest layer with weights: k*k*cin*cout MACs per output pixel
print("conv 16->32, 3x3 on 100x100:", arch.nn.Conv2d(16, 32, 3).flops(100, 100)[0], "MACs")
