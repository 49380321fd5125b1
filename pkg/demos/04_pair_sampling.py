"""
Mining training pairs with a cheap similarity scorer
====================================================

Siamese training needs labeled pairs.  Positives come from a basic image
similarity scorer (intensity-histogram L1 distance): for each query it
ranks the query's classmates and keeps the closest ones as candidates.
Negatives mix in-class and out-of-class items 3:7, because items from the
same category that the scorer does NOT consider close make hard negatives.
"""

import numpy as np

from simembed import sampling, toydata

dataset = toydata.make_shape_dataset(200, seed=11)
print(f"dataset: {len(dataset)} items, "
      f"{len(dataset.class_index)} shape classes")

scorer = sampling.BissScorer(kind="intensity_histogram", bins=16)
query_id = dataset.ids[0]
query = dataset.get(query_id)
print(f"\nquery {query_id} (class {query.class_label})")

# score a few classmates by hand to see what the scorer measures
classmates = [i for i in dataset.class_index[query.class_label]
              if i != query_id][:5]
for other in classmates:
    s = sampling.biss_score(scorer, query.image, dataset.get(other).image)
    print(f"  score vs {other}: {s:.4f}")

cfg = sampling.SamplerConfig(n_candidates=5, in_class_fraction=0.3,
                             rng_seed=0)
candidates = sampling.positive_candidates(scorer, query_id, dataset, cfg)
print(f"\ntop-{cfg.n_candidates} positive candidates: {candidates}")

rng = np.random.default_rng(0)
negatives = sampling.sample_negatives(query_id, dataset, cfg, 10, rng,
                                      exclude=candidates)
n_in = sum(1 for _, in_class in negatives if in_class)
print(f"\n10 negatives -> {n_in} in-class, {10 - n_in} out-of-class:")
for neg_id, in_class in negatives:
    tag = "in " if in_class else "out"
    print(f"  [{tag}] {neg_id} (class {dataset.get(neg_id).class_label})")

# a full batch: label 0 = similar, label 1 = dissimilar
batch = sampling.make_pair_batch(dataset, scorer, cfg, batch_size=8,
                                 pos_fraction=0.5,
                                 rng=np.random.default_rng(1))
print("\none training batch:")
for pair in batch:
    print(f"  {pair.query_id} / {pair.candidate_id}  label={pair.label}")
