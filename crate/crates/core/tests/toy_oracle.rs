//! Label fidelity of the toy generator, judged only from its pre-noise mask.

use embryogen_core::data::{generate_toy_dataset, Stage};

/// Number of 8-connected regions whose cells equal `value`. Regions touching
/// the border are skipped when `interior_only` is set.
fn regions(mask: &[bool], res: usize, value: bool, interior_only: bool) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if seen[start] || mask[start] != value {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut touches_border = false;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % res) as isize, (i / res) as isize);
            if x == 0 || y == 0 || x == res as isize - 1 || y == res as isize - 1 {
                touches_border = true;
            }
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= res as isize || ny >= res as isize {
                        continue;
                    }
                    let j = ny as usize * res + nx as usize;
                    if !seen[j] && mask[j] == value {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if !(interior_only && touches_border) {
            count += 1;
        }
    }
    count
}

#[test]
fn mask_components_agree_with_labels() {
    let res = 64;
    for stage in Stage::ALL {
        let samples = generate_toy_dataset(stage, 100, 31, res).unwrap();
        let mut agree = 0;
        for s in &samples {
            let cells = regions(&s.mask, res, true, false);
            let holes = regions(&s.mask, res, false, true);
            let ok = match stage {
                Stage::TwoCell => cells == 2,
                Stage::FourCell => cells == 4,
                Stage::EightCell => cells == 8,
                Stage::Morula => cells == 1 && holes == 0,
                Stage::Blastocyst => cells == 1 && holes >= 1,
            };
            agree += ok as usize;
        }
        assert_eq!(agree, 100, "{stage}: {agree}/100 agree");
    }
}
