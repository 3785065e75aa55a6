from .heuristic import (HEURISTICS, gen_average_attack, gen_bandwagon_attack, gen_lovehate_attack,
                        gen_random_attack, gen_segment_attack, popularity_ranking,
                        segment_by_similarity)
from .optimization import (AdversarialLoss, AttackDivergence, DenseSurrogate, MeanNegativeBPR,
                           SquaredLoss, SurrogateSpec, SurrogateState, attack_loss_function,
                           gen_bilevel_attack, gen_single_level_gradient_attack,
                           unrolled_loss_grad)
from .profiles import (EXPLICIT_TRIPLETS, IMPLICIT_PAIRS, NUKE, PUSH, AttackError, AttackParams,
                       FakeProfileSet, Profile, default_attack_params, discretize, fakes_to_tsv,
                       inject, select_targets)
