use super::{Checkpoint, PipelineConfig};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::real::Real;
use crate::src::SrcModel;
use crate::tokenfield::{denormalize, ChannelStats, TokenField};
use crate::training::CompactPath;

const RAE_STATS: &str = "rae_stats";
const COMPACT_STATS: &str = "compact_stats";
const EMA: &str = "ema/";

/// A trained compressor with the statistics of the data it was trained on.
#[derive(Clone, Debug)]
pub struct SrcArtifact<T: Real> {
    pub config: PipelineConfig,
    pub src: SrcModel<T>,
    pub rae_stats: ChannelStats<T>,
}

impl<T: Real> SrcArtifact<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config.to_text());
        c.push_params("", self.src.params());
        c.push_stats(RAE_STATS, &self.rae_stats);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = PipelineConfig::parse(&ckpt.config)?;
        let src = SrcModel::from_params(config.src.clone(), &ckpt.collect_params("", "src.")?.cast())?;
        let rae_stats = ckpt.stats(RAE_STATS)?.cast();
        Ok(Self { config, src, rae_stats })
    }
}

/// Frozen compressor plus both normalizations around it.
#[derive(Clone, Debug)]
pub struct Compressor<T: Real> {
    pub src: SrcModel<T>,
    pub rae_stats: ChannelStats<T>,
    pub compact_stats: ChannelStats<T>,
}

/// Everything needed to sample, score and decode: a trained flow, its EMA
/// and (optionally) the compressor whose outputs it models.
#[derive(Clone, Debug)]
pub struct FlowArtifact<T: Real> {
    pub config: PipelineConfig,
    pub compressor: Option<Compressor<T>>,
    pub flow: FlowModel<T>,
    pub ema: FlowModel<T>,
}

impl<T: Real> FlowArtifact<T> {
    pub fn path(&self) -> CompactPath<'_, T> {
        match &self.compressor {
            None => CompactPath::Direct,
            Some(c) => {
                CompactPath::Compressed { src: &c.src, rae_stats: &c.rae_stats, compact_stats: &c.compact_stats }
            }
        }
    }

    /// Compact fields back to data space:
    /// `denormalize(decode(denormalize₂(z_c)))`, or unchanged when there is
    /// no compressor.
    pub fn decode(&self, compact: &[TokenField<T>]) -> Result<Vec<TokenField<T>>> {
        let Some(c) = &self.compressor else {
            return Ok(compact.to_vec());
        };
        let mut out = Vec::with_capacity(compact.len());
        for chunk in compact.chunks(256) {
            let z: Vec<TokenField<T>> =
                chunk.iter().map(|f| denormalize(f, &c.compact_stats)).collect::<Result<_>>()?;
            let refs: Vec<&TokenField<T>> = z.iter().collect();
            for f in c.src.decode_batch(&refs)? {
                out.push(denormalize(&f, &c.rae_stats)?);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.to_text());
        if let Some(c) = &self.compressor {
            ck.push_params("", c.src.params());
            ck.push_stats(RAE_STATS, &c.rae_stats);
            ck.push_stats(COMPACT_STATS, &c.compact_stats);
        }
        ck.push_params("", self.flow.params());
        ck.push_params(EMA, self.ema.params());
        ck
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = PipelineConfig::parse(&ckpt.config)?;
        let compressor = if ckpt.section(COMPACT_STATS).is_some() {
            Some(Compressor {
                src: SrcModel::from_params(config.src.clone(), &ckpt.collect_params("", "src.")?.cast())?,
                rae_stats: ckpt.stats(RAE_STATS)?.cast(),
                compact_stats: ckpt.stats(COMPACT_STATS)?.cast(),
            })
        } else {
            None
        };
        let flow = FlowModel::from_params(config.flow.clone(), &ckpt.collect_params("", "flow.")?.cast())?;
        let ema = FlowModel::from_params(config.flow.clone(), &ckpt.collect_params(EMA, "flow.")?.cast())?;
        if ckpt.section(RAE_STATS).is_some() && compressor.is_none() {
            return Err(Error::Malformed("compressor statistics without compact statistics".into()));
        }
        Ok(Self { config, compressor, flow, ema })
    }
}
