use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::dump_maps;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_volume, OrganReport};
use crate::model::{FeatureNoise, Network};
use crate::scalar::Scalar;
use crate::tensor::{argmax_labels, LabelMap};

use super::checkpoint::Checkpoint;
use super::dataset::{stack_labels, Dataset, SplitPart, VolumeData};

pub(crate) const EVAL_STREAM: u64 = 3;

/// Metrics of every organ in one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeResult {
    pub volume_id: String,
    pub organs: Vec<OrganReport>,
}

/// Settings shared by every evaluation of one model.
#[derive(Clone, Copy, Debug)]
pub struct EvalSettings<'a> {
    pub udba: bool,
    /// Seeds the auxiliary-branch noise; each volume restarts the stream.
    pub seed: u64,
    /// Write confidence and attention maps here when set.
    pub maps_dir: Option<&'a Path>,
}

/// Argmax of the final main-decoder logits for every slice, stacked to
/// `[slices, s, s]`.
pub fn predict_volume<T: Scalar>(net: &Network<T>, vol: &VolumeData<T>, settings: &EvalSettings) -> Result<LabelMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(EVAL_STREAM);
    let mut noise = FeatureNoise::new(rng);
    let mut preds = Vec::with_capacity(vol.samples.len());
    for s in &vol.samples {
        let out = net.forward(&s.image, settings.udba, &mut noise)?;
        if let (Some(dir), Some(bundle)) = (settings.maps_dir, &out.confidence) {
            dump_maps(bundle, &s.id(), dir)?;
        }
        preds.push(argmax_labels(&out.main_final));
    }
    Ok(stack_labels(preds.iter()))
}

pub fn evaluate_volumes<T: Scalar>(
    net: &Network<T>,
    volumes: &[VolumeData<T>],
    organs: &[(u8, String)],
    settings: &EvalSettings,
) -> Result<Vec<VolumeResult>> {
    if let Some(dir) = settings.maps_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let classes = net.config().num_classes;
    if let Some((label, name)) = organs.iter().find(|(l, _)| *l as usize >= classes) {
        return Err(Error::Config(format!("organ {name} (label {label}) is outside the network's {classes} classes")));
    }
    volumes
        .iter()
        .map(|v| {
            let pred = predict_volume(net, v, settings)?;
            let organs = evaluate_volume(&v.labels(), &pred, v.spacing, organs)?;
            Ok(VolumeResult { volume_id: v.id.clone(), organs })
        })
        .collect()
}

/// Rebuilds the network and dataset described by `ck` and evaluates the
/// volumes of `part`.
pub fn evaluate_checkpoint<T: Scalar>(
    ck: &Checkpoint<T>,
    part: SplitPart,
    maps_dir: Option<&Path>,
) -> Result<Vec<VolumeResult>> {
    let net = ck.network()?;
    let dataset = Dataset::open(&ck.spec)?;
    let ids = dataset.ids(part);
    if ids.is_empty() {
        return Err(Error::EmptySplit(format!("{part:?} split of {} has no volumes", dataset.kind)));
    }
    let volumes = dataset.load_many(&ids)?;
    let settings = EvalSettings { udba: ck.spec.loss.udba, seed: ck.spec.seed, maps_dir };
    evaluate_volumes(&net, &volumes, &dataset.organ_labels(), &settings)
}

/// Mean foreground Dice over every organ of every volume.
pub fn mean_dice(results: &[VolumeResult]) -> Option<f64> {
    let all: Vec<f64> = results.iter().flat_map(|r| r.organs.iter().map(|o| o.dice)).collect();
    (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

pub fn volume_csv(results: &[VolumeResult]) -> String {
    let mut out = String::from("volume_id,organ,dice,asd,iou\n");
    for r in results {
        for o in &r.organs {
            writeln!(out, "{},{},{:.6},{},{:.6}", r.volume_id, o.organ, o.dice, fmt_metric(o.asd), o.iou).unwrap();
        }
    }
    out
}

pub fn write_volume_csv(results: &[VolumeResult], path: &Path) -> Result<()> {
    fs::write(path, volume_csv(results)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_marks_missing_asd() {
        let r = VolumeResult {
            volume_id: "v1".into(),
            organs: vec![
                OrganReport { organ: "heart".into(), label: 1, dice: 0.5, iou: 1.0 / 3.0, asd: Some(1.25) },
                OrganReport { organ: "aorta".into(), label: 2, dice: 0.0, iou: 0.0, asd: None },
            ],
        };
        let csv = volume_csv(std::slice::from_ref(&r));
        assert_eq!(
            csv,
            "volume_id,organ,dice,asd,iou\nv1,heart,0.500000,1.250000,0.333333\nv1,aorta,0.000000,NA,0.000000\n"
        );
        assert_eq!(mean_dice(&[r]), Some(0.25));
        assert_eq!(mean_dice(&[]), None);
    }
}
