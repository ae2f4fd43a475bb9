"""Rerank generation lattices with one encoder pass and best-path extraction."""

from .extraction import ExtractionConfig, FewMaskResult, best_path, best_path_in_subgraph, diverse_paths, few_mask_select
from .harness import (RerankReport, Scoring, run_ablation, run_diverse, run_eel, run_exhaustive,
                      run_model_score, run_sampled)
from .lattice import (BOS_TOKEN, CycleError, Diagnostic, Lattice, LatticeError, Node, Path,
                      PathLimitExceeded, count_paths, explode, generate_synthetic, pack_candidates,
                      topo_order, validate)
from .masking import (Canvas, CanvasOverflow, MaskConfig, assign_positions, bidirectional_reachability,
                      causal_reachability, few_masks, linearize, single_context)
from .scoring import (CausalScorer, LookupScorer, ScorerSpec, TokenScores, aggregate, ensemble,
                      model_score)

__version__ = "0.1.0"
