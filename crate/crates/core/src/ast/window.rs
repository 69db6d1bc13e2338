use super::Tree;

/// One node inside a convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowMember {
    pub node: usize,
    /// Depth counted bottom-up: the window root has `depth == d`, its
    /// children `d - 1`, and so on down to 1.
    pub depth: usize,
    /// 1-based position among its siblings, in source order.
    pub position: usize,
    /// Number of siblings including itself.
    pub siblings: usize,
}

/// Convolution window rooted at `root`: the root and its descendants down
/// to relative depth `d - 1`, in pre-order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub root: usize,
    pub window_depth: usize,
    pub members: Vec<WindowMember>,
}

impl Window {
    /// `K + 1`: member count including the root.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// One window per node, in node order.
///
/// # Panics
/// If `depth` is zero.
pub fn extract_windows(tree: &Tree, depth: usize) -> Vec<Window> {
    assert!(depth >= 1, "window depth must be at least 1");
    (0..tree.len())
        .map(|root| {
            let mut members = vec![WindowMember {
                node: root,
                depth,
                position: 1,
                siblings: 1,
            }];
            let mut stack: Vec<(usize, usize)> = Vec::new();
            let push_children = |stack: &mut Vec<(usize, usize)>, node: usize, rel: usize| {
                for &c in tree.children(node).iter().rev() {
                    stack.push((c, rel + 1));
                }
            };
            if depth > 1 {
                push_children(&mut stack, root, 0);
            }
            while let Some((node, rel)) = stack.pop() {
                let parent = tree.parent(node).expect("descendant has a parent");
                let siblings = tree.children(parent);
                let position = siblings
                    .iter()
                    .position(|&s| s == node)
                    .expect("child of parent")
                    + 1;
                members.push(WindowMember {
                    node,
                    depth: depth - rel,
                    position,
                    siblings: siblings.len(),
                });
                if rel + 1 < depth {
                    push_children(&mut stack, node, rel);
                }
            }
            Window {
                root,
                window_depth: depth,
                members,
            }
        })
        .collect()
}
