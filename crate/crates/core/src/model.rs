//! The assembled network: shared backbone, comparer and ranker, plus the
//! fixed anchor set of each tap.

use rand::Rng;

use crate::backbone::{gap, Backbone, BackboneConfig, ScoreTensor};
use crate::collab::select_regions;
use crate::comparer::Comparer;
use crate::error::{Error, Result};
use crate::geometry::{crop_resize, generate_anchors, AnchorSpec, Proposal, ProposalSet};
use crate::nn::{join, Param, Parameters};
use crate::ranker::{binarize, BinaryCode, Ranker};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorSpec,
    pub num_classes: usize,
    pub fusion_dim: usize,
    pub code_bits: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            anchors: AnchorSpec::default(),
            num_classes: 4,
            fusion_dim: 512,
            code_bits: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        if self.backbone.anchors_per_cell != self.anchors.per_cell() {
            return Err(Error::Config(format!(
                "score heads emit {} values per cell but the anchor spec has {} slots",
                self.backbone.anchors_per_cell,
                self.anchors.per_cell()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.fusion_dim == 0 || self.code_bits == 0 {
            return Err(Error::Config("fusion_dim and code_bits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub comparer: Comparer,
    pub ranker: Ranker,
    /// Clipped anchors of taps 1..3, each in flat-index order.
    pub proposals: [ProposalSet; 3],
}

/// Output of encoding one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub relaxed: Vec<f64>,
    pub code: BinaryCode,
    pub regions: [Proposal; 3],
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let dim = backbone.feature_dim();
        let comparer = Comparer::new(dim, config.num_classes, rng);
        let ranker = Ranker::new(dim, config.fusion_dim, config.code_bits, rng);
        let proposals = Self::anchor_sets(&config)?;
        Ok(Self {
            config,
            backbone,
            comparer,
            ranker,
            proposals,
        })
    }

    /// All parameters zero; used by tests and as the target of checkpoint
    /// loading.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::zeros(config.backbone.clone())?;
        let dim = backbone.feature_dim();
        let comparer = Comparer::zeros(dim, config.num_classes);
        let ranker = Ranker::zeros(dim, config.fusion_dim, config.code_bits);
        let proposals = Self::anchor_sets(&config)?;
        Ok(Self {
            config,
            backbone,
            comparer,
            ranker,
            proposals,
        })
    }

    fn anchor_sets(config: &ModelConfig) -> Result<[ProposalSet; 3]> {
        let grids = config.backbone.grids()?;
        let all = generate_anchors(&grids, &config.anchors, config.backbone.input_size, true)?;
        Ok(std::array::from_fn(|i| all.layer(i + 1)))
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.input_size
    }

    /// Crop `region` from `image` and zoom it to the backbone input size.
    pub fn zoom(&self, image: &Tensor3, region: &Proposal) -> Result<Tensor3> {
        crop_resize(image, &region.bbox, self.input_size())
    }

    /// Score tensors and the pooled whole-image feature.
    pub fn localize(&self, image: &Tensor3) -> Result<([ScoreTensor; 3], Vec<f64>)> {
        let maps = self.backbone.extract_features(image)?;
        let scores = self.backbone.localization_scores(&maps);
        Ok((scores, gap(&maps.taps[0])))
    }

    /// The three highest-scoring regions, one per tap.
    pub fn locate(&self, image: &Tensor3) -> Result<[Proposal; 3]> {
        let (scores, _) = self.localize(image)?;
        Ok(select_regions(&scores, &self.proposals))
    }

    /// Pooled features of the whole image and of its three selected regions.
    pub fn features(&self, image: &Tensor3) -> Result<([Vec<f64>; 4], [Proposal; 3])> {
        let (scores, f0) = self.localize(image)?;
        let regions = select_regions(&scores, &self.proposals);
        let mut feats = vec![f0];
        for region in &regions {
            let crop = self.zoom(image, region)?;
            feats.push(gap(&self.backbone.trunk_features(&crop)?));
        }
        let feats: [Vec<f64>; 4] = feats.try_into().expect("four feature vectors");
        Ok((feats, regions))
    }

    /// Localize, zoom, fuse and binarize. The comparer is not consulted.
    pub fn encode(&self, image: &Tensor3) -> Result<Encoding> {
        let (feats, regions) = self.features(image)?;
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let trace = self.ranker.forward(&refs)?;
        let code = binarize(&trace.code);
        Ok(Encoding {
            relaxed: trace.code,
            code,
            regions,
        })
    }
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.comparer.visit(&join(prefix, "comparer"), f);
        self.ranker.visit(&join(prefix, "ranker"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.comparer.visit_mut(&join(prefix, "comparer"), f);
        self.ranker.visit_mut(&join(prefix, "ranker"), f);
    }
}
