import torch

from unifactor.config import RunConfig

torch.set_num_threads(1)


def tiny_config(**over) -> RunConfig:
    """Smallest config that exercises every code path quickly."""
    cfg = RunConfig()
    d = cfg.data
    d.S, d.C, d.G, d.V_t, d.V_v, d.n = 2, 2, 4, 24, 16, 32
    d.n_fillers, d.palette_size, d.max_caption = 4, 2, 6
    d.templates = ("C S Q", "F C S Q", "C F S Q F")
    m = cfg.model
    m.num_layers, m.width, m.heads, m.d_z, m.rank = 2, 8, 2, 8, 4
    for sec in (cfg.pretrain, cfg.stage1, cfg.stage2, cfg.sft):
        sec.batch_size = 4
        sec.warmup = 0
        sec.log_every = 1
    cfg.pretrain.steps = 3
    cfg.stage1.steps = 4
    cfg.stage2.steps = 4
    cfg.stage2.ramp_steps = 2
    cfg.eval.batch_size = 16
    for k, v in over.items():
        sec, key = k.split("__")
        setattr(getattr(cfg, sec), key, v)
    return cfg.validate()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
