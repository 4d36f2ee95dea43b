use super::DetectedInstance;

/// Person detections must score strictly above this to be paired.
pub const HUMAN_THRESHOLD: f64 = 0.8;
/// Object detections must score strictly above this to be paired.
pub const OBJECT_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct PairProposal {
    pub human: DetectedInstance,
    pub object: Option<DetectedInstance>,
}

/// Cross product of kept humans and kept objects, followed by one
/// object-less proposal per kept human.
///
/// Ordering: for each kept human in detection order, its pairs in object
/// detection order; all object-less proposals come last.
pub fn propose_pairs(detections: &[DetectedInstance]) -> Vec<PairProposal> {
    let humans: Vec<&DetectedInstance> = detections
        .iter()
        .filter(|d| d.is_person() && d.score > HUMAN_THRESHOLD)
        .collect();
    let objects: Vec<&DetectedInstance> = detections
        .iter()
        .filter(|d| !d.is_person() && d.score > OBJECT_THRESHOLD)
        .collect();
    let mut out = Vec::with_capacity(humans.len() * (objects.len() + 1));
    for h in &humans {
        for o in &objects {
            out.push(PairProposal {
                human: (*h).clone(),
                object: Some((*o).clone()),
            });
        }
    }
    out.extend(humans.iter().map(|h| PairProposal {
        human: (*h).clone(),
        object: None,
    }));
    out
}
