//! The embedding network, its losses, and the two training stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{cosine_similarity, cross_entropy_loss, hinge_rank_loss, softmax};
pub use network::{
    backward, embed_batch, forward, forward_classify, forward_embed, ClassifierHead,
    EmbeddingVector, Geometry, Phase, SkeletonParams,
};
pub use optim::{AdamConfig, AdamMoments};
pub use sampling::{sample_triplets, SegmentBank, TrainItem, Triplet, TripletConfig};
pub use tensor::Real;
pub use train::{pretrain_classifier, train_metric, TrainConfig, TrainReport, TrainState};

/// Audio domain of a segment or track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Monophonic,
    Mixed,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Monophonic => "monophonic",
            Domain::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which domains fill the triplet roles, and whether the anchor network is
/// shared with the other roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mono,
    Mixed,
    Cross,
}

impl Mode {
    pub fn anchor_domain(self) -> Domain {
        match self {
            Mode::Mono | Mode::Cross => Domain::Monophonic,
            Mode::Mixed => Domain::Mixed,
        }
    }

    /// Domain of positives and negatives.
    pub fn other_domain(self) -> Domain {
        match self {
            Mode::Mono => Domain::Monophonic,
            Mode::Mixed | Mode::Cross => Domain::Mixed,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Mode::Mono => 0,
            Mode::Mixed => 1,
            Mode::Cross => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Mode::Mono),
            1 => Ok(Mode::Mixed),
            2 => Ok(Mode::Cross),
            t => Err(Error::Truncated(format!("unknown mode tag {t}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mono => "mono",
            Mode::Mixed => "mixed",
            Mode::Cross => "cross",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mono" => Ok(Mode::Mono),
            "mixed" => Ok(Mode::Mixed),
            "cross" => Ok(Mode::Cross),
            _ => Err(Error::Config(format!("unknown mode {s:?} (mono|mixed|cross)"))),
        }
    }
}

/// One or two skeleton networks. `other_net` is `None` exactly when the
/// roles share the anchor's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T = f32> {
    pub mode: Mode,
    pub anchor_net: SkeletonParams<T>,
    pub other_net: Option<SkeletonParams<T>>,
}

impl<T: Real> ModelBundle<T> {
    /// For CROSS the single initializer is cloned into both networks.
    pub fn from_skeleton(mode: Mode, net: SkeletonParams<T>) -> Self {
        let other_net = (mode == Mode::Cross).then(|| net.clone());
        ModelBundle {
            mode,
            anchor_net: net,
            other_net,
        }
    }

    pub fn random(mode: Mode, geometry: &Geometry, seed: u64) -> Result<Self> {
        Ok(Self::from_skeleton(mode, SkeletonParams::random(geometry, seed)?))
    }

    pub fn validate(&self) -> Result<()> {
        let shared = self.other_net.is_none();
        if shared == (self.mode == Mode::Cross) {
            return Err(Error::Config(format!(
                "{} bundle must have {} parameter set(s)",
                self.mode,
                self.distinct_parameter_sets_required()
            )));
        }
        Ok(())
    }

    fn distinct_parameter_sets_required(&self) -> usize {
        if self.mode == Mode::Cross {
            2
        } else {
            1
        }
    }

    pub fn distinct_parameter_sets(&self) -> usize {
        1 + usize::from(self.other_net.is_some())
    }

    pub fn other(&self) -> &SkeletonParams<T> {
        self.other_net.as_ref().unwrap_or(&self.anchor_net)
    }

    /// The network that embeds audio of the given domain.
    pub fn net_for(&self, domain: Domain) -> &SkeletonParams<T> {
        match self.mode {
            Mode::Cross if domain == Domain::Mixed => self.other(),
            _ => &self.anchor_net,
        }
    }

    pub fn nets(&self) -> Vec<&SkeletonParams<T>> {
        std::iter::once(&self.anchor_net)
            .chain(self.other_net.as_ref())
            .collect()
    }

    pub fn nets_mut(&mut self) -> Vec<&mut SkeletonParams<T>> {
        std::iter::once(&mut self.anchor_net)
            .chain(self.other_net.as_mut())
            .collect()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.anchor_net.geometry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_contract() {
        let g = Geometry::standard();
        for (mode, n) in [(Mode::Mono, 1), (Mode::Mixed, 1), (Mode::Cross, 2)] {
            let b = ModelBundle::<f32>::random(mode, &g, 1).unwrap();
            assert_eq!(b.distinct_parameter_sets(), n);
            b.validate().unwrap();
        }
        let mut bad = ModelBundle::<f32>::random(Mode::Mono, &g, 1).unwrap();
        bad.other_net = Some(bad.anchor_net.clone());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cross_embeds_domains_with_separate_nets() {
        let g = Geometry::standard();
        let mut b = ModelBundle::<f32>::random(Mode::Cross, &g, 1).unwrap();
        b.other_net.as_mut().unwrap().projection.bias[0] = 9.0;
        assert!(std::ptr::eq(b.net_for(Domain::Monophonic), &b.anchor_net));
        assert_eq!(b.net_for(Domain::Mixed).projection.bias[0], 9.0);
        let m = ModelBundle::<f32>::random(Mode::Mono, &g, 1).unwrap();
        assert!(std::ptr::eq(m.net_for(Domain::Mixed), &m.anchor_net));
    }
}
