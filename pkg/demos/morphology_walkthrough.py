"""From a measured parcel to an assembly sheet and a mixer.

Run: python3 demos/morphology_walkthrough.py
"""

import numpy as np

from parceldrone.allocation import (effectiveness_matrix, geometry_from_morphology,
                                    mixer_from_geometry)
from parceldrone.core import CentralModuleSpec, ModuleSpec, PARCELS
from parceldrone.morphogen import (MorphogenWeights, emit_assembly_instructions,
                                   enumerate_viable, generate_morphology)

np.set_printoptions(precision=3, suppress=True)

# A slender parcel: one metre long, a quarter metre wide.
parcel = PARCELS["III"]
print(f"parcel: {parcel}")

# Every even module count that hovers below the effort threshold and still fits,
# ranked by effort plus leftover edge length.
for cand in enumerate_viable(parcel, CentralModuleSpec(), ModuleSpec(),
                             MorphogenWeights()):
    print(f"  n={cand.n:2d}  e_H={cand.e_H:.3f}  s_L={cand.s_L:.3f}  score={cand.score:.3f}")

morph = generate_morphology(parcel)
print(f"\nchosen: {morph.n} modules, total mass {morph.total_mass:.2f} kg")
print(emit_assembly_instructions(morph))

# The mixer turns (roll, pitch, yaw, thrust) demands into per-motor commands.
geom = geometry_from_morphology(morph)
mixer = mixer_from_geometry(geom)
print("mixer (rows = motors, columns = roll pitch yaw thrust):")
print(mixer.matrix)
print("B @ M is diagonal:")
print(effectiveness_matrix(geom) @ mixer.matrix)
