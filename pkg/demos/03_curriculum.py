"""
Ordering samples by routing complexity
======================================

A sample's complexity vector holds, per layer, the share of its tokens that
took two experts. The easiest sample (fewest two-expert tokens) becomes the
anchor and the rest follow by cosine similarity to it.
"""

from adaptmoe.curriculum import complexity_vector, cosine_similarity, reorder, select_anchor

# per-layer two-expert flags for four short samples (3 layers)
flags = {
    0: [[1, 0, 0, 1], [1, 1, 0, 0], [0, 0, 1, 1]],
    1: [[0, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]],
    2: [[0, 0, 1, 0], [0, 0, 0, 0], [0, 1, 1, 0]],
    3: [[0, 0, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0]],
}
vectors = [complexity_vector(sid, [[bool(x) for x in layer] for layer in f], 4) for sid, f in flags.items()]
for v in vectors:
    print(v.sample_id, v.r)

anchor = select_anchor(vectors)
print("anchor:", anchor)
a = next(v for v in vectors if v.sample_id == anchor)
for v in vectors:
    print(f"  similarity of {v.sample_id} to anchor: {cosine_similarity(a, v):.3f}")

# sample 3 points the same way as the anchor, so it comes straight after it
print("training order:", reorder(vectors))
