from .itemknn import ItemKNNModel, cosine_item_similarity, top_neighbors, train_itemknn
from .model import (EmbeddingModel, TrainConfig, TrainingDivergence, load_model, predict_rating,
                    predict_ratings, propagate, save_model)
from .pairwise import (NegativeSampler, bpr_loss_grad, lightgcn_loss_grad, normalized_adjacency,
                       train_bpr, train_lightgcn)
from .pointwise import pointwise_loss_grad, train_mf_pointwise
from .topk import RankedList, rank_scores, recommend_topk, topk_for_users

__all__ = [
    "EmbeddingModel", "ItemKNNModel", "NegativeSampler", "RankedList", "TrainConfig",
    "TrainingDivergence", "bpr_loss_grad", "cosine_item_similarity", "lightgcn_loss_grad",
    "load_model", "normalized_adjacency", "pointwise_loss_grad", "predict_rating",
    "predict_ratings", "propagate", "rank_scores", "recommend_topk", "save_model",
    "top_neighbors", "topk_for_users", "train_bpr", "train_itemknn", "train_lightgcn",
    "train_mf_pointwise",
]
