use super::{AsrModel, MtModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ASR and MT models chained through the ASR decoder's context vectors.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub asr: AsrModel,
    pub mt: MtModel,
}

impl JointModel {
    pub fn new(asr: AsrModel, mt: MtModel) -> Result<Self> {
        let (a, m) = (asr.config(), mt.config());
        if a.d_model != m.d_model {
            return Err(Error::Config(format!(
                "ASR width {} differs from MT width {}",
                a.d_model, m.d_model
            )));
        }
        if a.src_vocab != m.src_vocab {
            return Err(Error::Config(format!(
                "ASR vocabulary {} differs from MT source vocabulary {}",
                a.src_vocab, m.src_vocab
            )));
        }
        Ok(JointModel { asr, mt })
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.asr.to_tensors();
        out.extend(self.mt.to_tensors());
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        Self::new(AsrModel::from_tensors(tensors)?, MtModel::from_tensors(tensors)?)
    }
}
