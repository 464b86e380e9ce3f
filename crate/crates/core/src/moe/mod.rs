//! The MoE layer: top-k selection, expert dispatch and weighted
//! combination, expert FFNs and the auxiliary load-balancing loss.

mod aux;
mod dispatch;
mod expert;
mod layer;

pub use aux::{aux_from_stats, aux_loss, dispatch_fractions, importance, AuxForm};
pub use dispatch::{select_topk, RoutingDecision};
pub use expert::{ExpertFfn, ExpertKind};
pub use layer::{LayerParams, MoeLayer, MoeNodes, MoeOutput, DEFAULT_ALPHA_AUX};
