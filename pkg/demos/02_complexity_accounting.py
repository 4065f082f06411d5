"""Counting multiplications, parameters and memory for the autoencoder family.

Run: python3 demos/02_complexity_accounting.py
"""

from bcsinet import complexity
from bcsinet.complexity import count_spec, encoder_memory_multiple
from bcsinet.models import ETAS, ModelSpec

print("Encoder multiplications and shared parameters by compression ratio:")
for row in complexity.table("tab4"):
    print(f"  eta {row['eta']:>4s}  {row['method']:11s} mul {row['mul']:>6s}  params {row['params']:>6s}")

# Where the cost lives: almost all of the float encoder is its FC layer.
enc, _ = count_spec(ModelSpec("CsiNet", "A", 2, 0.25))
print(f"\nfloat encoder at eta 1/4: {enc.flops} FLOPs, {enc.params} parameters")

# Memory saved on the device by packing the FC weights to one bit each.
print("\nEncoder memory saving vs the float encoder:")
for head in "ABC":
    values = ", ".join(f"1/{round(1 / eta)}: {encoder_memory_multiple(head, eta):.2f}x" for eta in ETAS)
    print(f"  head {head}: {values}")
