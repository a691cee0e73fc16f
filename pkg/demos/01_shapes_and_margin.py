"""How big an input window does a 100x100 output tile need?

Walks the deep BDC-LSTM stack layer by layer and prints the resulting
margin, then does the same for the narrower desk-scale stack.
"""
import numpy as np

from ansg import recurrent as R

for name, stack in [("full-size", R.full_stack()), ("desk", R.desk_stack(8, 8)), ("reduced", R.reduced_stack())]:
    chain = R.shape_chain(stack)
    out = chain[-1][1]
    margin = R.stack_margin(stack, out)
    n_params = sum(int(np.prod(s)) for s in R.stack_param_shapes(stack).values())
    print(f"{name} stack ({n_params} parameters)")
    print("  " + R.format_chain(chain))
    print(f"  margin {margin}: output {out}x{out} needs input {out + margin}x{out + margin}")

# the margin does not depend on the tile size, only on the layers
desk = R.desk_stack(8, 8)
print("desk margins for tiles 24/48/100:", [R.stack_margin(desk, t) for t in (24, 48, 100)])
