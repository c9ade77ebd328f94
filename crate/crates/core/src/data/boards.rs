use crate::chess::{self, Board, Color, PieceKind, KINDS, SIZE};
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

/// Non-king kinds a random board may contain beyond the two kings.
const EXTRA_KINDS: [PieceKind; 4] = [
    PieceKind::Pawn,
    PieceKind::Knight,
    PieceKind::Rook,
    PieceKind::Queen,
];

fn random_color(rng: &mut Prng) -> Color {
    if rng::uniform(rng, 0.0, 1.0) < 0.5 {
        Color::White
    } else {
        Color::Black
    }
}

fn random_empty_square(board: &Board, rng: &mut Prng) -> (usize, usize) {
    loop {
        let r = rng::uniform(rng, 0.0, SIZE as f64).floor() as usize % SIZE;
        let f = rng::uniform(rng, 0.0, SIZE as f64).floor() as usize % SIZE;
        if board.get(r, f).is_none() {
            return (r, f);
        }
    }
}

/// One random placement attempt: both kings plus 2-8 extra pieces. May be
/// illegal (pawn on a home rank, idle king exposed); callers resample.
fn random_placement(rng: &mut Prng) -> Board {
    let mut board = Board::empty(random_color(rng));
    for color in [Color::White, Color::Black] {
        let (r, f) = random_empty_square(&board, rng);
        board.set(r, f, Some((color, PieceKind::King)));
    }
    let extras = rng::uniform(rng, 2.0, 9.0).floor() as usize;
    for _ in 0..extras.clamp(2, 8) {
        let (r, f) = random_empty_square(&board, rng);
        let kind = EXTRA_KINDS[rng::uniform(rng, 0.0, 4.0).floor() as usize % 4];
        board.set(r, f, Some((random_color(rng), kind)));
    }
    board
}

fn sample_until(rng: &mut Prng, accept: impl Fn(&Board) -> bool) -> Board {
    for _ in 0..100_000 {
        let board = random_placement(rng);
        if accept(&board) {
            return board;
        }
    }
    unreachable!("random placements should satisfy the predicate well within the attempt budget")
}

/// Seeded legal random positions: two kings and 2-8 other pieces, placements
/// resampled until they pass the legality rules.
pub fn generate_boards(n: usize, seed: u64) -> Vec<Board> {
    let mut rng = rng::derive(seed, 13);
    (0..n).map(|_| sample_until(&mut rng, chess::is_legal)).collect()
}

/// Whether the side to move's queen stands on a square the opponent attacks.
/// Undefined (None) when that side has no queen on the board.
pub fn concept_queen_threat(board: &Board) -> Option<f64> {
    let mover = board.side_to_move;
    let (r, f) = board.find(mover, PieceKind::Queen)?;
    Some(if chess::square_attacked(board, r, f, mover.other()) {
        1.0
    } else {
        0.0
    })
}

/// Legal positions where the side to move has a queen and the threat concept
/// takes the requested value.
pub fn generate_queen_boards(n: usize, seed: u64, threatened: bool) -> Vec<Board> {
    let want = if threatened { 1.0 } else { 0.0 };
    let mut rng = rng::derive(seed, 14);
    (0..n)
        .map(|_| {
            sample_until(&mut rng, |b| {
                chess::is_legal(b) && concept_queen_threat(b) == Some(want)
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// A second king for one side.
    DuplicateKing,
    /// A pawn on its home or promotion rank.
    PawnOnBackRank,
    /// The idle side's king left attacked by the mover.
    ExposedIdleKing,
    /// One side's king removed outright.
    MissingKing,
    /// Two piece planes hot on one square; representable only as a tensor.
    MultiHotSquare,
}

pub const CORRUPTIONS: [Corruption; 5] = [
    Corruption::DuplicateKing,
    Corruption::PawnOnBackRank,
    Corruption::ExposedIdleKing,
    Corruption::MissingKing,
    Corruption::MultiHotSquare,
];

/// Break one legality rule of a legal board, returning the encoded tensor
/// (the multi-hot corruption has no `Board` equivalent).
pub fn corrupt(board: &Board, kind: Corruption, rng: &mut Prng) -> Tensor {
    match kind {
        Corruption::DuplicateKing => {
            let mut b = board.clone();
            let (r, f) = random_empty_square(&b, rng);
            b.set(r, f, Some((random_color(rng), PieceKind::King)));
            b.encode()
        }
        Corruption::PawnOnBackRank => {
            let mut b = board.clone();
            let rank = if rng::uniform(rng, 0.0, 1.0) < 0.5 { 0 } else { SIZE - 1 };
            let file = loop {
                let f = rng::uniform(rng, 0.0, SIZE as f64).floor() as usize % SIZE;
                if b.get(rank, f).is_none() {
                    break f;
                }
            };
            b.set(rank, file, Some((random_color(rng), PieceKind::Pawn)));
            b.encode()
        }
        Corruption::ExposedIdleKing => {
            let mut b = board.clone();
            let mover = b.side_to_move;
            let idle = mover.other();
            let (kr, kf) = b.find(idle, PieceKind::King).expect("legal boards have both kings");
            // Drop any moving-side piece anywhere it attacks the idle king,
            // so knight hops and long slides are represented, not just an
            // adjacent queen. Kings and back-rank pawns are excluded to keep
            // this the only rule broken.
            let mut spots: Vec<(usize, usize, PieceKind)> = Vec::new();
            for r in 0..SIZE {
                for f in 0..SIZE {
                    if b.get(r, f).is_some() {
                        continue;
                    }
                    for kind in KINDS {
                        if kind == PieceKind::King
                            || (kind == PieceKind::Pawn && (r == 0 || r == SIZE - 1))
                        {
                            continue;
                        }
                        b.set(r, f, Some((mover, kind)));
                        if chess::square_attacked(&b, kr, kf, mover) {
                            spots.push((r, f, kind));
                        }
                        b.set(r, f, None);
                    }
                }
            }
            assert!(!spots.is_empty(), "a queen adjacent to the king always attacks it");
            let pick = rng::uniform(rng, 0.0, spots.len() as f64).floor() as usize % spots.len();
            let (r, f, kind) = spots[pick];
            b.set(r, f, Some((mover, kind)));
            b.encode()
        }
        Corruption::MissingKing => {
            let mut b = board.clone();
            let victim = random_color(rng);
            let (r, f) = b.find(victim, PieceKind::King).expect("legal boards have both kings");
            b.set(r, f, None);
            b.encode()
        }
        Corruption::MultiHotSquare => {
            let mut t = board.encode();
            let (r, f, c, k) = board
                .pieces()
                .nth(rng::uniform(rng, 0.0, board.pieces().count() as f64).floor() as usize
                    % board.pieces().count())
                .expect("boards hold at least two kings");
            let occupied = chess::plane_of(c, k);
            let extra = loop {
                let p = rng::uniform(rng, 0.0, chess::PIECE_PLANES as f64).floor() as usize
                    % chess::PIECE_PLANES;
                if p != occupied {
                    break p;
                }
            };
            t.data[extra * SIZE * SIZE + r * SIZE + f] = 1.0;
            t
        }
    }
}

/// Paired legal/illegal encodings for classifier training; corruptions cycle
/// through every kind so each rule is represented.
pub fn generate_classifier_data(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let boards = generate_boards(n, seed);
    let mut rng = rng::derive(seed, 15);
    let legal: Vec<Tensor> = boards.iter().map(Board::encode).collect();
    let illegal: Vec<Tensor> = boards
        .iter()
        .enumerate()
        .map(|(i, b)| corrupt(b, CORRUPTIONS[i % CORRUPTIONS.len()], &mut rng))
        .collect();
    (legal, illegal)
}

pub const AUX_TARGETS: usize = 5;

/// Total value (pawn 1, knight 3, rook 5, queen 9) of the mover's non-king
/// pieces standing on squares the opponent attacks.
pub fn attacked_material(board: &Board) -> f64 {
    let mover = board.side_to_move;
    let attacks = chess::attack_map(board, mover.other());
    board
        .pieces()
        .filter(|&(r, f, c, k)| c == mover && k != PieceKind::King && attacks[r][f])
        .map(|(_, _, _, k)| match k {
            PieceKind::Pawn => 1.0,
            PieceKind::Knight => 3.0,
            PieceKind::Rook => 5.0,
            PieceKind::Queen => 9.0,
            PieceKind::King => unreachable!(),
        })
        .sum()
}

/// Regression targets that force a board model to understand positions:
/// scaled material balance, whether the mover is in check, scaled piece
/// count, the scaled value of the mover's pieces under attack, and whether
/// the mover's queen specifically stands attacked. Queen safety gets its own
/// output the way it would dominate a position evaluation: folded into
/// attacked material alone it is linearly inseparable from a hanging rook
/// plus a pawn.
pub fn aux_targets(board: &Board) -> Tensor {
    Tensor {
        shape: vec![AUX_TARGETS],
        data: vec![
            chess::material_balance(board) / 10.0,
            if chess::side_to_move_in_check(board) { 1.0 } else { 0.0 },
            board.pieces().count() as f64 / 12.0,
            attacked_material(board) / 10.0,
            concept_queen_threat(board).unwrap_or(0.0),
        ],
    }
}
