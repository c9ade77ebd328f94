//! 6x6 Los Alamos-style chess: standard pieces minus bishops on a 6x6
//! board. Provides the board type, its tensor encoding, a text format,
//! attack computation (two independent implementations) and a rule-based
//! placement-legality oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIZE: usize = 6;
pub const PIECE_PLANES: usize = 10;
/// Piece planes plus the side-to-move plane.
pub const PLANES: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    White,
    Black,
}

impl Color {
    pub fn other(self) -> Color {
        match self {
            Color::White => Color::Black,
            Color::Black => Color::White,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceKind {
    Pawn,
    Knight,
    Rook,
    Queen,
    King,
}

pub const KINDS: [PieceKind; 5] = [
    PieceKind::Pawn,
    PieceKind::Knight,
    PieceKind::Rook,
    PieceKind::Queen,
    PieceKind::King,
];

/// Plane layout: white P N R Q K on planes 0-4, black on 5-9, side to move
/// on plane 10 (all ones when white moves, all zeros when black moves).
pub fn plane_of(color: Color, kind: PieceKind) -> usize {
    let c = match color {
        Color::White => 0,
        Color::Black => 1,
    };
    c * 5 + kind as usize
}

pub fn piece_of_plane(plane: usize) -> Option<(Color, PieceKind)> {
    if plane >= PIECE_PLANES {
        return None;
    }
    let color = if plane < 5 { Color::White } else { Color::Black };
    Some((color, KINDS[plane % 5]))
}

fn piece_char(color: Color, kind: PieceKind) -> char {
    let c = match kind {
        PieceKind::Pawn => 'P',
        PieceKind::Knight => 'N',
        PieceKind::Rook => 'R',
        PieceKind::Queen => 'Q',
        PieceKind::King => 'K',
    };
    match color {
        Color::White => c,
        Color::Black => c.to_ascii_lowercase(),
    }
}

fn char_piece(ch: char) -> Result<Option<(Color, PieceKind)>> {
    if ch == '.' {
        return Ok(None);
    }
    let kind = match ch.to_ascii_uppercase() {
        'P' => PieceKind::Pawn,
        'N' => PieceKind::Knight,
        'R' => PieceKind::Rook,
        'Q' => PieceKind::Queen,
        'K' => PieceKind::King,
        _ => return Err(Error::Data(format!("unknown piece character {ch:?}"))),
    };
    let color = if ch.is_ascii_uppercase() {
        Color::White
    } else {
        Color::Black
    };
    Ok(Some((color, kind)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Board {
    /// squares[rank][file]; rank 0 is white's home rank.
    pub squares: [[Option<(Color, PieceKind)>; SIZE]; SIZE],
    pub side_to_move: Color,
}

impl Board {
    pub fn empty(side_to_move: Color) -> Self {
        Board {
            squares: [[None; SIZE]; SIZE],
            side_to_move,
        }
    }

    /// Los Alamos starting position: R N Q K N R behind a pawn rank, on
    /// both sides, white to move.
    pub fn starting_position() -> Self {
        let mut b = Board::empty(Color::White);
        let back = [
            PieceKind::Rook,
            PieceKind::Knight,
            PieceKind::Queen,
            PieceKind::King,
            PieceKind::Knight,
            PieceKind::Rook,
        ];
        for (file, &kind) in back.iter().enumerate() {
            b.squares[0][file] = Some((Color::White, kind));
            b.squares[5][file] = Some((Color::Black, kind));
            b.squares[1][file] = Some((Color::White, PieceKind::Pawn));
            b.squares[4][file] = Some((Color::Black, PieceKind::Pawn));
        }
        b
    }

    pub fn get(&self, rank: usize, file: usize) -> Option<(Color, PieceKind)> {
        self.squares[rank][file]
    }

    pub fn set(&mut self, rank: usize, file: usize, piece: Option<(Color, PieceKind)>) {
        self.squares[rank][file] = piece;
    }

    pub fn pieces(&self) -> impl Iterator<Item = (usize, usize, Color, PieceKind)> + '_ {
        (0..SIZE).flat_map(move |r| {
            (0..SIZE).filter_map(move |f| self.squares[r][f].map(|(c, k)| (r, f, c, k)))
        })
    }

    pub fn count(&self, color: Color, kind: PieceKind) -> usize {
        self.pieces()
            .filter(|&(_, _, c, k)| c == color && k == kind)
            .count()
    }

    pub fn find(&self, color: Color, kind: PieceKind) -> Option<(usize, usize)> {
        self.pieces()
            .find(|&(_, _, c, k)| c == color && k == kind)
            .map(|(r, f, _, _)| (r, f))
    }

    /// Tensor encoding: [11, 6, 6], one plane per (color, kind) pair plus
    /// the side-to-move plane, values in {0, 1}.
    pub fn encode(&self) -> Tensor {
        let mut t = Tensor::zeros(&[PLANES, SIZE, SIZE]);
        for (r, f, c, k) in self.pieces() {
            t.data[plane_of(c, k) * SIZE * SIZE + r * SIZE + f] = 1.0;
        }
        if self.side_to_move == Color::White {
            for i in 0..SIZE * SIZE {
                t.data[PIECE_PLANES * SIZE * SIZE + i] = 1.0;
            }
        }
        t
    }

    /// Strict inverse of `encode`: values must be exactly 0 or 1, each
    /// square holds at most one piece, and the side-to-move plane is
    /// constant.
    pub fn decode(t: &Tensor) -> Result<Board> {
        if t.shape != [PLANES, SIZE, SIZE] {
            return Err(Error::Data(format!(
                "board tensor must be [{PLANES}, {SIZE}, {SIZE}], got {:?}",
                t.shape
            )));
        }
        for &v in &t.data {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Data(format!(
                    "board tensor values must be exactly 0 or 1, found {v}"
                )));
            }
        }
        let stm0 = t.data[PIECE_PLANES * SIZE * SIZE];
        for i in 0..SIZE * SIZE {
            if t.data[PIECE_PLANES * SIZE * SIZE + i] != stm0 {
                return Err(Error::Data("side-to-move plane is not constant".into()));
            }
        }
        let side = if stm0 == 1.0 { Color::White } else { Color::Black };
        let mut b = Board::empty(side);
        for r in 0..SIZE {
            for f in 0..SIZE {
                let mut found = None;
                for p in 0..PIECE_PLANES {
                    if t.data[p * SIZE * SIZE + r * SIZE + f] == 1.0 {
                        if found.is_some() {
                            return Err(Error::Data(format!(
                                "square ({r}, {f}) holds more than one piece"
                            )));
                        }
                        found = piece_of_plane(p);
                    }
                }
                b.squares[r][f] = found;
            }
        }
        Ok(b)
    }

    /// Text diagram: six ranks from black's home rank down to white's, one
    /// character per square (PNRQK white, pnrqk black, '.' empty), then a
    /// line holding "w" or "b".
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in (0..SIZE).rev() {
            for f in 0..SIZE {
                out.push(match self.squares[r][f] {
                    Some((c, k)) => piece_char(c, k),
                    None => '.',
                });
            }
            out.push('\n');
        }
        out.push(match self.side_to_move {
            Color::White => 'w',
            Color::Black => 'b',
        });
        out.push('\n');
        out
    }

    pub fn parse_text(text: &str) -> Result<Board> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != SIZE + 1 {
            return Err(Error::Data(format!(
                "board text needs {} lines (6 ranks + side to move), got {}",
                SIZE + 1,
                lines.len()
            )));
        }
        let side = match lines[SIZE].trim() {
            "w" => Color::White,
            "b" => Color::Black,
            other => {
                return Err(Error::Data(format!(
                    "side-to-move line must be \"w\" or \"b\", got {other:?}"
                )))
            }
        };
        let mut b = Board::empty(side);
        for (i, line) in lines[..SIZE].iter().enumerate() {
            let rank = SIZE - 1 - i;
            let chars: Vec<char> = line.trim_end().chars().collect();
            if chars.len() != SIZE {
                return Err(Error::Data(format!(
                    "rank line {i} must hold {SIZE} characters, got {}",
                    chars.len()
                )));
            }
            for (file, &ch) in chars.iter().enumerate() {
                b.squares[rank][file] = char_piece(ch)?;
            }
        }
        Ok(b)
    }
}

const KNIGHT_OFFSETS: [(i32, i32); 8] = [
    (2, 1),
    (2, -1),
    (-2, 1),
    (-2, -1),
    (1, 2),
    (1, -2),
    (-1, 2),
    (-1, -2),
];
const KING_OFFSETS: [(i32, i32); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];
const ROOK_RAYS: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const DIAGONAL_RAYS: [(i32, i32); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

fn on_board(r: i32, f: i32) -> Option<(usize, usize)> {
    if (0..SIZE as i32).contains(&r) && (0..SIZE as i32).contains(&f) {
        Some((r as usize, f as usize))
    } else {
        None
    }
}

fn pawn_dir(color: Color) -> i32 {
    match color {
        Color::White => 1,
        Color::Black => -1,
    }
}

/// Attack generation: for every piece of `by`, mark the squares it attacks.
/// Sliders (rook, queen) walk outward and stop after the first occupied
/// square, which itself counts as attacked. Queens combine rook and
/// diagonal rays; there are no bishops.
pub fn attack_map(board: &Board, by: Color) -> [[bool; SIZE]; SIZE] {
    fn mark(map: &mut [[bool; SIZE]; SIZE], r: i32, f: i32) {
        if let Some((r, f)) = on_board(r, f) {
            map[r][f] = true;
        }
    }
    let mut map = [[false; SIZE]; SIZE];
    for (r, f, color, kind) in board.pieces() {
        if color != by {
            continue;
        }
        let (r, f) = (r as i32, f as i32);
        match kind {
            PieceKind::Pawn => {
                let d = pawn_dir(color);
                mark(&mut map, r + d, f - 1);
                mark(&mut map, r + d, f + 1);
            }
            PieceKind::Knight => {
                for (dr, df) in KNIGHT_OFFSETS {
                    mark(&mut map, r + dr, f + df);
                }
            }
            PieceKind::King => {
                for (dr, df) in KING_OFFSETS {
                    mark(&mut map, r + dr, f + df);
                }
            }
            PieceKind::Rook | PieceKind::Queen => {
                let rays: &[(i32, i32)] = if kind == PieceKind::Rook {
                    &ROOK_RAYS
                } else {
                    &[ROOK_RAYS, DIAGONAL_RAYS].concat()
                };
                for &(dr, df) in rays {
                    let (mut cr, mut cf) = (r + dr, f + df);
                    while let Some((ur, uf)) = on_board(cr, cf) {
                        map[ur][uf] = true;
                        if board.squares[ur][uf].is_some() {
                            break;
                        }
                        cr += dr;
                        cf += df;
                    }
                }
            }
        }
    }
    map
}

/// Attack detection, written independently of `attack_map`: scan outward
/// from the target square and ask what sits at each origin. Must agree with
/// `attack_map` on every board.
pub fn square_attacked(board: &Board, rank: usize, file: usize, by: Color) -> bool {
    let (r, f) = (rank as i32, file as i32);
    // A pawn of `by` attacks (r, f) from one rank behind its push direction.
    let d = pawn_dir(by);
    for df in [-1, 1] {
        if let Some((pr, pf)) = on_board(r - d, f + df) {
            if board.squares[pr][pf] == Some((by, PieceKind::Pawn)) {
                return true;
            }
        }
    }
    for (dr, df) in KNIGHT_OFFSETS {
        if let Some((nr, nf)) = on_board(r + dr, f + df) {
            if board.squares[nr][nf] == Some((by, PieceKind::Knight)) {
                return true;
            }
        }
    }
    for (dr, df) in KING_OFFSETS {
        if let Some((kr, kf)) = on_board(r + dr, f + df) {
            if board.squares[kr][kf] == Some((by, PieceKind::King)) {
                return true;
            }
        }
    }
    for (dr, df) in ROOK_RAYS {
        let (mut cr, mut cf) = (r + dr, f + df);
        while let Some((ur, uf)) = on_board(cr, cf) {
            if let Some((c, k)) = board.squares[ur][uf] {
                if c == by && (k == PieceKind::Rook || k == PieceKind::Queen) {
                    return true;
                }
                break;
            }
            cr += dr;
            cf += df;
        }
    }
    for (dr, df) in DIAGONAL_RAYS {
        let (mut cr, mut cf) = (r + dr, f + df);
        while let Some((ur, uf)) = on_board(cr, cf) {
            if let Some((c, k)) = board.squares[ur][uf] {
                if c == by && k == PieceKind::Queen {
                    return true;
                }
                break;
            }
            cr += dr;
            cf += df;
        }
    }
    false
}

/// Placement legality: exactly one king per side, no pawns on either home
/// rank, and the side that is NOT to move is not in check (the mover could
/// otherwise capture the king). Returns the violations found.
pub fn legality_violations(board: &Board) -> Vec<String> {
    let mut v = Vec::new();
    for color in [Color::White, Color::Black] {
        let kings = board.count(color, PieceKind::King);
        if kings != 1 {
            v.push(format!("{color:?} has {kings} kings"));
        }
    }
    for rank in [0, SIZE - 1] {
        for file in 0..SIZE {
            if let Some((c, PieceKind::Pawn)) = board.squares[rank][file] {
                v.push(format!("{c:?} pawn on rank {rank}"));
            }
        }
    }
    let idle = board.side_to_move.other();
    if let Some((kr, kf)) = board.find(idle, PieceKind::King) {
        if square_attacked(board, kr, kf, board.side_to_move) {
            v.push(format!("{idle:?} is in check but it is not their move"));
        }
    }
    v
}

pub fn is_legal(board: &Board) -> bool {
    legality_violations(board).is_empty()
}

/// Whether the side to move's own king is attacked (a regular check, as
/// opposed to the illegal exposed-king situation).
pub fn side_to_move_in_check(board: &Board) -> bool {
    match board.find(board.side_to_move, PieceKind::King) {
        Some((r, f)) => square_attacked(board, r, f, board.side_to_move.other()),
        None => false,
    }
}

/// Pawn 1, knight 3, rook 5, queen 9, scored white minus black. Kings
/// cancel out and are skipped.
pub fn material_balance(board: &Board) -> f64 {
    let mut total = 0.0;
    for (_, _, c, k) in board.pieces() {
        let value = match k {
            PieceKind::Pawn => 1.0,
            PieceKind::Knight => 3.0,
            PieceKind::Rook => 5.0,
            PieceKind::Queen => 9.0,
            PieceKind::King => 0.0,
        };
        total += if c == Color::White { value } else { -value };
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_board(rng: &mut rng::Prng) -> Board {
        let mut b = Board::empty(if rng.gen_bool(0.5) {
            Color::White
        } else {
            Color::Black
        });
        let n = rng.gen_range(0..=12);
        for _ in 0..n {
            let r = rng.gen_range(0..SIZE);
            let f = rng.gen_range(0..SIZE);
            let plane = rng.gen_range(0..PIECE_PLANES);
            b.squares[r][f] = piece_of_plane(plane);
        }
        b
    }

    #[test]
    fn starting_position_is_legal_and_round_trips() {
        let b = Board::starting_position();
        assert!(is_legal(&b));
        assert_eq!(Board::decode(&b.encode()).unwrap(), b);
        assert_eq!(Board::parse_text(&b.to_text()).unwrap(), b);
        let text = "rnqknr\npppppp\n......\n......\nPPPPPP\nRNQKNR\nw\n";
        assert_eq!(b.to_text(), text);
    }

    #[test]
    fn both_attack_implementations_agree() {
        let mut rng = rng::seeded(99);
        for _ in 0..1000 {
            let b = random_board(&mut rng);
            for by in [Color::White, Color::Black] {
                let map = attack_map(&b, by);
                for r in 0..SIZE {
                    for f in 0..SIZE {
                        assert_eq!(
                            map[r][f],
                            square_attacked(&b, r, f, by),
                            "disagreement at ({r}, {f}) for {by:?} on\n{}",
                            b.to_text()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn slider_attacks_stop_at_blockers() {
        let mut b = Board::empty(Color::White);
        b.set(0, 3, Some((Color::Black, PieceKind::Rook)));
        b.set(2, 3, Some((Color::White, PieceKind::Pawn)));
        b.set(4, 3, Some((Color::White, PieceKind::Queen)));
        let map = attack_map(&b, Color::Black);
        assert!(map[1][3]);
        assert!(map[2][3], "first blocker square is attacked");
        assert!(!map[3][3], "squares past the blocker are not");
        assert!(!map[4][3]);
    }

    #[test]
    fn pawn_attacks_are_diagonal_only() {
        let mut b = Board::empty(Color::White);
        b.set(2, 2, Some((Color::White, PieceKind::Pawn)));
        let map = attack_map(&b, Color::White);
        assert!(map[3][1] && map[3][3]);
        assert!(!map[3][2], "pawns do not attack their push square");
        let mut b2 = Board::empty(Color::Black);
        b2.set(3, 0, Some((Color::Black, PieceKind::Pawn)));
        let map2 = attack_map(&b2, Color::Black);
        assert!(map2[2][1], "black pawns attack toward rank 0");
        assert!(!map2[2][0]);
        // Edge pawn: only one capture square, no wraparound.
        assert!(!map2[2][5]);
    }

    #[test]
    fn queen_covers_rook_and_diagonal_rays() {
        let mut b = Board::empty(Color::White);
        b.set(3, 3, Some((Color::White, PieceKind::Queen)));
        let map = attack_map(&b, Color::White);
        assert!(map[0][3] && map[3][0] && map[0][0] && map[5][5] && map[1][5]);
        assert!(!map[1][2], "knight-shaped square is not a queen attack");
    }

    #[test]
    fn legality_catches_each_violation() {
        let mut b = Board::empty(Color::White);
        b.set(0, 0, Some((Color::White, PieceKind::King)));
        b.set(5, 5, Some((Color::Black, PieceKind::King)));
        assert!(is_legal(&b));

        let mut dup = b.clone();
        dup.set(2, 2, Some((Color::White, PieceKind::King)));
        assert!(!is_legal(&dup));

        let mut pawn = b.clone();
        pawn.set(5, 0, Some((Color::White, PieceKind::Pawn)));
        assert!(!is_legal(&pawn));

        // White to move, black king on a file white's rook controls: the
        // idle side is in check, so the position is unreachable.
        let mut exposed = b.clone();
        exposed.set(3, 5, Some((Color::White, PieceKind::Rook)));
        assert!(!is_legal(&exposed));
        // Flip side to move: now it is an ordinary check.
        exposed.side_to_move = Color::Black;
        assert!(is_legal(&exposed));
        assert!(side_to_move_in_check(&exposed));
    }

    #[test]
    fn decode_rejects_bad_encodings() {
        let b = Board::starting_position();
        let mut multi = b.encode();
        // Stack a second piece on an occupied square.
        multi.data[plane_of(Color::Black, PieceKind::Queen) * 36] = 1.0;
        assert!(Board::decode(&multi).is_err());

        let mut frac = b.encode();
        frac.data[0] = 0.5;
        assert!(Board::decode(&frac).is_err());

        let mut stm = b.encode();
        stm.data[PIECE_PLANES * 36 + 7] = 0.0;
        assert!(Board::decode(&stm).is_err());
    }

    #[test]
    fn parse_rejects_malformed_text() {
        assert!(Board::parse_text("......\n").is_err());
        let bad_char = "......\n......\n......\n...x..\n......\n......\nw\n";
        assert!(Board::parse_text(bad_char).is_err());
        let bad_side = "......\n......\n......\n......\n......\n......\nq\n";
        assert!(Board::parse_text(bad_side).is_err());
    }

    #[test]
    fn material_balance_counts_points() {
        let mut b = Board::empty(Color::White);
        b.set(0, 0, Some((Color::White, PieceKind::Queen)));
        b.set(1, 0, Some((Color::White, PieceKind::Pawn)));
        b.set(5, 5, Some((Color::Black, PieceKind::Rook)));
        b.set(5, 4, Some((Color::Black, PieceKind::Knight)));
        assert_eq!(material_balance(&b), 9.0 + 1.0 - 5.0 - 3.0);
        assert_eq!(material_balance(&Board::starting_position()), 0.0);
    }
}
