"""Regenerate docs/parameter_paths.md from the live model definitions."""

from pathlib import Path

from lapformer.model import build_model, variant_config

HEADER = """# Parameter paths

Checkpoints and `load_pretrained_encoder` address tensors by these dotted
paths (PyTorch `state_dict` names). All tensors are stored as little-endian
float32; `num_batches_tracked` counters are stored as float32 too and cast
back on load.

Third-party MiT weights can be imported with a key-translation file: plain
text, one `src dst` pair per line, `#` starts a comment. `dst` is a path
from the tables below (the `encoder.` prefix is optional).

## Encoder pattern

`i` is the stage (0..3), `j` the block within the stage. Stage depths are
2/2/2/2 for S (MiT-B1), 3/4/6/3 for M (MiT-B2), 3/4/18/3 for L (MiT-B3).
`attn.sr*` exists only where the stage's reduction ratio is above 1
(stages 0-2).

| path | shape |
|---|---|
| `encoder.stages.i.patch_embed.proj.weight` | (C_i, C_{i-1}, k, k) |
| `encoder.stages.i.patch_embed.proj.bias` | (C_i,) |
| `encoder.stages.i.patch_embed.norm.{weight,bias}` | (C_i,) |
| `encoder.stages.i.blocks.j.norm1.{weight,bias}` | (C_i,) |
| `encoder.stages.i.blocks.j.attn.q.{weight,bias}` | (C_i, C_i), (C_i,) |
| `encoder.stages.i.blocks.j.attn.kv.{weight,bias}` | (2 C_i, C_i), (2 C_i,) |
| `encoder.stages.i.blocks.j.attn.proj.{weight,bias}` | (C_i, C_i), (C_i,) |
| `encoder.stages.i.blocks.j.attn.sr.{weight,bias}` | (C_i, C_i, r, r), (C_i,) |
| `encoder.stages.i.blocks.j.attn.sr_norm.{weight,bias}` | (C_i,) |
| `encoder.stages.i.blocks.j.norm2.{weight,bias}` | (C_i,) |
| `encoder.stages.i.blocks.j.ffn.fc1.{weight,bias}` | (4 C_i, C_i), (4 C_i,) |
| `encoder.stages.i.blocks.j.ffn.dwconv.{weight,bias}` | (4 C_i, 1, 3, 3), (4 C_i,) |
| `encoder.stages.i.blocks.j.ffn.fc2.{weight,bias}` | (C_i, 4 C_i), (C_i,) |
| `encoder.stages.i.norm.{weight,bias}` | (C_i,) |

"""


def table(model, prefix=""):
    rows = ["| path | shape |", "|---|---|"]
    for k, v in model.state_dict().items():
        if k.startswith(prefix):
            rows.append(f"| `{k}` | {tuple(v.shape)} |")
    return "\n".join(rows) + "\n"


def main():
    out = HEADER
    out += "## LAPFormer-S (full model)\n\n" + table(build_model(variant_config("S"))) + "\n"
    out += "## LAPFormer-L encoder (MiT-B3)\n\n" + table(build_model(variant_config("L")), "encoder.")
    path = Path(__file__).parents[1] / "docs" / "parameter_paths.md"
    path.write_text(out)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
