"""Why the offset loss can be fooled.

The middle point's probability mass sits on its two mirror-image
neighbours.  Their weighted centroid is exactly the right place, so the
displacement error is ~0, while the permutation loss sees the wrong mass.
"""

from permgm import losses

s, ctx, gt = losses.symmetric_ambiguity_instance()
print("coordinates:\n", ctx.p2)
print("prediction row for the middle point:", s[1])
print("predicted position:", s[1] @ ctx.p2, "target:", ctx.p2[1])
print("offset loss      :", round(losses.offset_loss(s, ctx, gt).item(), 5))
print("permutation loss :", round(losses.permutation_loss(s, gt).item(), 3))

# sharpening the prediction towards the truth
for w in (0.05, 0.3, 0.6, 0.9):
    s2 = s.copy()
    s2[1] = [(1 - w) / 2, w, (1 - w) / 2, 0, 0]
    print(f"  p(correct)={w:.2f}  offset={losses.offset_loss(s2, ctx, gt).item():.5f}  "
          f"perm={losses.permutation_loss(s2, gt).item():.3f}")
