use super::Utterance;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Concatenate every two consecutive frames, halving the frame rate.
///
/// Frame `t` of the output is `[x(2t), x(2t+1)]`; labels are taken from
/// the even-indexed source frame. A trailing odd frame is dropped.
pub fn splice2(u: &Utterance) -> Result<Utterance> {
    let (t, d) = (u.frames(), u.dim());
    if t < 2 {
        return Err(Error::EmptyUtterance(format!("splicing needs at least 2 frames, got {t}")));
    }
    let out_t = t / 2;
    let mut data = Vec::with_capacity(out_t * 2 * d);
    for i in 0..out_t {
        data.extend_from_slice(u.features.row(2 * i));
        data.extend_from_slice(u.features.row(2 * i + 1));
    }
    let every_other = |v: &Vec<usize>| v.iter().step_by(2).take(out_t).copied().collect::<Vec<_>>();
    Ok(Utterance {
        features: Tensor::from_rows(out_t, 2 * d, data),
        frame_states: u.frame_states.as_ref().map(every_other),
        seq_class: u.seq_class,
        cluster_labels: u.cluster_labels.as_ref().map(every_other),
    })
}
